use std::fmt;
use std::rc::Rc;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Marks a gathered element that reads as zero (padding).
const PAD: usize = usize::MAX;

/// Backward rule for [`Graph::custom`]: `(inputs, output, output_grad) -> input grads`.
pub type BackwardFn = Rc<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxColumns(Var, f64),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    Concat(Vec<Var>, usize),
    BilinearSample {
        features: Var,
        coords: Var,
        height: usize,
        width: usize,
    },
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// Node ids grow monotonically, so replaying ids in descending order visits
/// every consumer of a value before the value itself.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.record(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.record(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.record(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.record(v, Op::Div(a, b), &[a, b], "div")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.record(v, Op::Scale(a, s), &[a], "scale")
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.record(v, Op::Offset(a), &[a], "offset")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = gemm(self.value(a), false, self.value(b), false)?;
        self.record(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.record(v, Op::Transpose(a), &[a], "transpose")
    }

    pub fn softmax_columns(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let v = self.value(a).softmax_columns(temperature)?;
        self.record(v, Op::SoftmaxColumns(a, temperature), &[a], "softmax_columns")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.record(v, Op::Exp(a), &[a], "exp")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.record(v, Op::Abs(a), &[a], "abs")
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        self.record(v, Op::Sqrt(a), &[a], "sqrt")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.record(v, Op::LeakyRelu(a, slope), &[a], "leaky_relu")
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::param(format!("clamp bounds {lo} > {hi}")));
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.record(v, Op::Clamp(a, lo, hi), &[a], "clamp")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums a matrix over `axis` (0 → `1×N`, 1 → `M×1`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.ensure_matrix("sum_axis")?;
        let v = match axis {
            0 => Tensor::new(&[1, n], x.column_sums())?,
            1 => Tensor::new(&[m, 1], (0..m).map(|i| x.row(i).iter().sum()).collect())?,
            _ => return Err(Error::param(format!("sum_axis: axis {axis} out of range"))),
        };
        self.record(v, Op::SumAxis(a, axis), &[a], "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.record(v, Op::Reshape(a), &[a], "reshape")
    }

    /// `out[i] = src[index[i]]`, with `None` reading as zero.
    pub fn gather(&mut self, src: Var, index: &[Option<usize>], shape: &[usize]) -> Result<Var> {
        let len = self.value(src).len();
        let packed: Vec<usize> = index
            .iter()
            .map(|i| match i {
                Some(k) if *k < len => Ok(*k),
                Some(k) => Err(Error::dim(format!("gather index {k} out of range {len}"))),
                None => Ok(PAD),
            })
            .collect::<Result<_>>()?;
        self.gather_packed(src, packed.into(), shape)
    }

    fn gather_packed(&mut self, src: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let data = self.value(src).data();
        let out: Vec<f64> = index
            .iter()
            .map(|&k| if k == PAD { 0.0 } else { data[k] })
            .collect();
        let v = Tensor::new(shape, out)?;
        self.record(v, Op::Gather(src, index), &[src], "gather")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).ensure_matrix("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::dim(format!("slice_cols {start}..{end} of {n}")));
        }
        let w = end - start;
        let index: Vec<usize> = (0..m)
            .flat_map(|i| (start..end).map(move |j| i * n + j))
            .collect();
        self.gather_packed(a, index.into(), &[m, w])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).ensure_matrix("slice_rows")?;
        if start >= end || end > m {
            return Err(Error::dim(format!("slice_rows {start}..{end} of {m}")));
        }
        let index: Vec<usize> = (start * n..end * n).collect();
        self.gather_packed(a, index.into(), &[end - start, n])
    }

    /// Selects columns of a matrix in the given order.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).ensure_matrix("select_cols")?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::dim(format!("column {bad} out of range {n}")));
        }
        let index: Vec<usize> = (0..m)
            .flat_map(|i| cols.iter().map(move |&j| i * n + j))
            .collect();
        self.gather_packed(a, index.into(), &[m, cols.len()])
    }

    /// Repeats a `1×N` row `m` times.
    pub fn broadcast_row(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = self.value(a).ensure_matrix("broadcast_row")?;
        if r != 1 {
            return Err(Error::dim("broadcast_row expects a single row"));
        }
        let index: Vec<usize> = (0..m).flat_map(|_| 0..n).collect();
        self.gather_packed(a, index.into(), &[m, n])
    }

    /// Repeats an `M×1` column `n` times.
    pub fn broadcast_col(&mut self, a: Var, n: usize) -> Result<Var> {
        let (m, c) = self.value(a).ensure_matrix("broadcast_col")?;
        if c != 1 {
            return Err(Error::dim("broadcast_col expects a single column"));
        }
        let index: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(n)).collect();
        self.gather_packed(a, index.into(), &[m, n])
    }

    /// Fills `shape` with the single element of a one-element tensor.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::dim("broadcast_scalar expects one element"));
        }
        let n: usize = shape.iter().product();
        self.gather_packed(a, vec![0; n].into(), shape)
    }

    /// Concatenates matrices along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of nothing"));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).ensure_matrix("concat"))
            .collect::<Result<_>>()?;
        let v = match axis {
            0 => {
                let n = shapes[0].1;
                if shapes.iter().any(|s| s.1 != n) {
                    return Err(Error::dim("concat rows: column counts differ"));
                }
                let m = shapes.iter().map(|s| s.0).sum();
                let data = parts.iter().flat_map(|&p| self.value(p).data().to_vec()).collect();
                Tensor::new(&[m, n], data)?
            }
            1 => {
                let m = shapes[0].0;
                if shapes.iter().any(|s| s.0 != m) {
                    return Err(Error::dim("concat cols: row counts differ"));
                }
                let n: usize = shapes.iter().map(|s| s.1).sum();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(&[m, n], data)?
            }
            _ => return Err(Error::param(format!("concat: axis {axis} out of range"))),
        };
        self.record(v, Op::Concat(parts.to_vec(), axis), parts, "concat")
    }

    /// Bilinear lookup of a `C×(H·W)` feature grid at the `2×M` points
    /// `(x, y)` given in cell coordinates. Points outside the grid are
    /// clamped to the edge and get no coordinate gradient.
    pub fn bilinear_sample(
        &mut self,
        features: Var,
        coords: Var,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let f = self.value(features);
        let (c, n) = f.ensure_matrix("bilinear_sample features")?;
        if n != height * width {
            return Err(Error::dim(format!(
                "bilinear_sample: {n} cells for a {height}x{width} grid"
            )));
        }
        let (two, m) = self.value(coords).ensure_matrix("bilinear_sample coords")?;
        if two != 2 {
            return Err(Error::dim("bilinear_sample coords must be 2xM"));
        }
        let xy = self.value(coords).data();
        let mut out = vec![0.0; c * m];
        for p in 0..m {
            let s = BilinearTap::new(xy[p], xy[m + p], height, width);
            for ch in 0..c {
                out[ch * m + p] = s.interpolate(&f.data()[ch * n..(ch + 1) * n]);
            }
        }
        let v = Tensor::new(&[c, m], out)?;
        self.record(
            v,
            Op::BilinearSample {
                features,
                coords,
                height,
                width,
            },
            &[features, coords],
            "bilinear_sample",
        )
    }

    /// Records an operation whose value was computed by the caller and whose
    /// backward rule is supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.record(value, Op::Custom(inputs.to_vec(), backward), inputs, "custom")
    }

    // -- composites ---------------------------------------------------------

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// L1 norm of each column (`axis = 0`) or row (`axis = 1`).
    pub fn l1_norm_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let m = self.abs(a)?;
        self.sum_axis(m, axis)
    }

    /// L2 norm of each column (`axis = 0`) or row (`axis = 1`).
    pub fn l2_norm_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sq = self.square(a)?;
        let s = self.sum_axis(sq, axis)?;
        self.sqrt(s)
    }

    /// Divides each column by its sum.
    pub fn normalize_columns(&mut self, a: Var) -> Result<Var> {
        let m = self.shape(a)[0];
        let sums = self.sum_axis(a, 0)?;
        let b = self.broadcast_row(sums, m)?;
        self.div(a, b)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse pass from a one-element `loss`. Gradients start at zero on
    /// every call; higher-order derivatives are not supported.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in self.local_grads(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Div(a, b) => {
                let ga = g.zip_map(val(*b), |gi, bi| gi / bi)?;
                let gb = g
                    .mul(&node.value)?
                    .zip_map(val(*b), |t, bi| -t / bi)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Offset(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let ga = gemm(g, false, val(*b), true)?;
                let gb = gemm(val(*a), true, g, false)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::SoftmaxColumns(a, t) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut out = vec![0.0; m * n];
                for j in 0..n {
                    let mut dot = 0.0;
                    for i in 0..m {
                        dot += g.data()[i * n + j] * y.data()[i * n + j];
                    }
                    for i in 0..m {
                        let k = i * n + j;
                        out[k] = y.data()[k] * (g.data()[k] - dot) / t;
                    }
                }
                vec![(*a, Tensor::new(&[m, n], out)?)]
            }
            Op::Exp(a) => vec![(*a, g.mul(&node.value)?)],
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |gi, x| gi * sign(x))?)],
            Op::Sqrt(a) => vec![(
                *a,
                g.zip_map(&node.value, |gi, r| if r > 0.0 { gi * 0.5 / r } else { 0.0 })?,
            )],
            Op::LeakyRelu(a, slope) => vec![(
                *a,
                g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { gi * slope })?,
            )],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                g.zip_map(val(*a), |gi, x| if x > *lo && x < *hi { gi } else { 0.0 })?,
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::SumAxis(a, axis) => {
                let x = val(*a);
                let (m, n) = (x.rows(), x.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                vec![(*a, Tensor::new(&[m, n], out)?)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Gather(src, index) => {
                let mut out = Tensor::zeros(val(*src).shape());
                let d = out.data_mut();
                for (&k, gi) in index.iter().zip(g.data()) {
                    if k != PAD {
                        d[k] += gi;
                    }
                }
                vec![(*src, out)]
            }
            Op::Concat(parts, axis) => {
                let mut res = Vec::with_capacity(parts.len());
                let (gm, gn) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let (pm, pn) = (val(p).rows(), val(p).cols());
                    let mut out = vec![0.0; pm * pn];
                    if *axis == 0 {
                        out.copy_from_slice(&g.data()[offset * gn..(offset + pm) * gn]);
                        offset += pm;
                    } else {
                        for i in 0..gm {
                            out[i * pn..(i + 1) * pn]
                                .copy_from_slice(&g.data()[i * gn + offset..i * gn + offset + pn]);
                        }
                        offset += pn;
                    }
                    res.push((p, Tensor::new(&[pm, pn], out)?));
                }
                res
            }
            Op::BilinearSample {
                features,
                coords,
                height,
                width,
            } => {
                let f = val(*features);
                let xy = val(*coords);
                let (c, n) = (f.rows(), f.cols());
                let m = xy.cols();
                let mut gf = vec![0.0; c * n];
                let mut gxy = vec![0.0; 2 * m];
                for p in 0..m {
                    let s = BilinearTap::new(xy.data()[p], xy.data()[m + p], *height, *width);
                    for ch in 0..c {
                        let go = g.data()[ch * m + p];
                        let plane = &f.data()[ch * n..(ch + 1) * n];
                        s.scatter(go, &mut gf[ch * n..(ch + 1) * n]);
                        let (dx, dy) = s.coord_grad(plane);
                        gxy[p] += go * dx;
                        gxy[m + p] += go * dy;
                    }
                }
                vec![
                    (*features, Tensor::new(&[c, n], gf)?),
                    (*coords, Tensor::new(&[2, m], gxy)?),
                ]
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = backward(&values, &node.value, g);
                if grads.len() != inputs.len() {
                    return Err(Error::dim("custom backward returned wrong gradient count"));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        })
    }
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

/// The four taps and weights of one bilinear lookup.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    width: usize,
    /// Coordinate strictly inside the grid along x / y (gradient flows).
    free_x: bool,
    free_y: bool,
}

impl BilinearTap {
    pub(crate) fn new(x: f64, y: f64, height: usize, width: usize) -> Self {
        let (x0, x1, fx, free_x) = axis_taps(x, width);
        let (y0, y1, fy, free_y) = axis_taps(y, height);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            width,
            free_x,
            free_y,
        }
    }

    fn weights(&self) -> [(usize, f64); 4] {
        let w = self.width;
        [
            (self.y0 * w + self.x0, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.y0 * w + self.x1, self.fx * (1.0 - self.fy)),
            (self.y1 * w + self.x0, (1.0 - self.fx) * self.fy),
            (self.y1 * w + self.x1, self.fx * self.fy),
        ]
    }

    pub(crate) fn interpolate(&self, plane: &[f64]) -> f64 {
        self.weights().iter().map(|&(k, w)| w * plane[k]).sum()
    }

    fn scatter(&self, g: f64, grad_plane: &mut [f64]) {
        for (k, w) in self.weights() {
            grad_plane[k] += g * w;
        }
    }

    fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let w = self.width;
        let f00 = plane[self.y0 * w + self.x0];
        let f01 = plane[self.y0 * w + self.x1];
        let f10 = plane[self.y1 * w + self.x0];
        let f11 = plane[self.y1 * w + self.x1];
        let dx = if self.free_x {
            (1.0 - self.fy) * (f01 - f00) + self.fy * (f11 - f10)
        } else {
            0.0
        };
        let dy = if self.free_y {
            (1.0 - self.fx) * (f10 - f00) + self.fx * (f11 - f01)
        } else {
            0.0
        };
        (dx, dy)
    }
}

fn axis_taps(x: f64, size: usize) -> (usize, usize, f64, bool) {
    if size == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (size - 1) as f64;
    let free = x > 0.0 && x < hi;
    let xc = x.clamp(0.0, hi);
    let x0 = (xc.floor() as usize).min(size - 2);
    (x0, x0 + 1, xc - x0 as f64, free)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_gradient_by_hand() {
        // d/da sum(a·b) = ones·bᵀ; with b = 2I every entry is 2.
        let mut g = Graph::new();
        let a = g.param(Tensor::identity(2));
        let b = g.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]));
        let p = g.matmul(a, b).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn matmul_trace_gradient_is_b_transposed() {
        // d/da trace(a·b) = bᵀ
        let mut g = Graph::new();
        let a = g.param(Tensor::identity(2));
        let b = g.constant(t(&[2, 2], &[2.0, 1.0, -3.0, 2.0]));
        let p = g.matmul(a, b).unwrap();
        let diag = g.gather(p, &[Some(0), Some(3)], &[2]).unwrap();
        let loss = g.sum(diag).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, -3.0, 1.0, 2.0]);
    }

    #[test]
    fn reused_value_accumulates_both_paths() {
        // y = x*x + 3x  →  dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1.5]));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let y = g.add(sq, lin).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn diamond_graph_sum_rule() {
        // u = 2x, v = x², w = u·v = 2x³ → dw/dx = 6x²
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let u = g.scale(x, 2.0).unwrap();
        let v = g.mul(x, x).unwrap();
        let w = g.mul(u, v).unwrap();
        let grads = g.backward(w).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[24.0]);
    }

    #[test]
    fn backward_twice_starts_from_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let s = g.square(x).unwrap();
        let loss = g.sum(s).unwrap();
        let first = g.backward(loss).unwrap();
        let second = g.backward(loss).unwrap();
        assert_eq!(first.get(x), second.get(x));
        assert_eq!(first.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::Numeric(_))));
        let z = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.div(x, z), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn gather_padding_reads_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.gather(x, &[Some(2), None, Some(2)], &[3]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 0.0, 3.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_and_slices_round_trip() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.param(t(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice_cols(c, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
        let r = g.concat(&[a, a], 0).unwrap();
        let lower = g.slice_rows(r, 2, 4).unwrap();
        assert_eq!(g.value(lower), g.value(a));
    }

    #[test]
    fn bilinear_exact_on_grid_points() {
        let mut g = Graph::new();
        let f = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let xy = g.constant(t(&[2, 3], &[0.0, 1.0, 0.5, 0.0, 1.0, 0.5]));
        let s = g.bilinear_sample(f, xy, 2, 2).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 4.0, 2.5]);
    }

    #[test]
    fn bilinear_clamps_outside() {
        let mut g = Graph::new();
        let f = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let xy = g.param(t(&[2, 1], &[-3.0, 7.0]));
        let s = g.bilinear_sample(f, xy, 2, 2).unwrap();
        assert_eq!(g.value(s).data(), &[3.0]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xy).unwrap().data(), &[0.0, 0.0]);
    }
}
