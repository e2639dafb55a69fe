//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and a backward
//! rule. [`Tape::backward`] walks the nodes once in reverse order and returns
//! the cotangent of every node that the loss depends on.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule gets to see.
pub struct BackwardArgs<'a> {
    /// Cotangent of the node output, same length as `output`.
    pub grad: &'a [f64],
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Which inputs need a cotangent at all. A rule may return an empty
    /// vector for inputs flagged `false`.
    pub needs: &'a [bool],
}

/// Maps the output cotangent to one cotangent per input. An empty vector
/// stands for "no contribution".
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Result<Vec<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

/// Cotangents produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Cotangent of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Cotangent as a tensor, zero-filled when the loss does not reach `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Smallest distance to a non-differentiable point (relu hinge, max tie,
    /// cell boundary) observed while recording. Finite-difference checks use
    /// it to reject samples that sit on a kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn note_kink(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node("leaf", value, Vec::new(), None, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node("constant", value, Vec::new(), None, false)
    }

    fn push_node(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation whose forward value was computed by the caller.
    ///
    /// `backward` is checked at backward time: every returned cotangent must
    /// be empty or match its input's length.
    pub fn custom(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor,
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        self.push_node(op, output, inputs.to_vec(), backward, requires_grad)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if !out.is_scalar() {
            return Err(Error::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let cots = rule(&BackwardArgs {
                grad: &g,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            })?;
            if cots.len() != node.inputs.len() {
                return Err(Error::invalid(
                    node.op,
                    format!(
                        "backward returned {} cotangents for {} inputs",
                        cots.len(),
                        node.inputs.len()
                    ),
                ));
            }
            for (k, (input, cot)) in node.inputs.iter().zip(cots).enumerate() {
                if cot.is_empty() || !needs[k] {
                    continue;
                }
                let expected = self.nodes[input.0].value.len();
                if cot.len() != expected {
                    return Err(Error::Cotangent {
                        op: node.op,
                        input: k,
                        got: cot.len(),
                        expected,
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&cot).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(cot),
                }
            }
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    // ---- element-wise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.custom(
            "add",
            &[a, b],
            out,
            Box::new(|args| Ok(vec![args.grad.to_vec(), args.grad.to_vec()])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.custom(
            "sub",
            &[a, b],
            out,
            Box::new(|args| {
                Ok(vec![
                    args.grad.to_vec(),
                    args.grad.iter().map(|g| -g).collect(),
                ])
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.custom(
            "mul",
            &[a, b],
            out,
            Box::new(|args| {
                let (x, y) = (args.inputs[0].data(), args.inputs[1].data());
                let ga = args.grad.iter().zip(y).map(|(g, y)| g * y).collect();
                let gb = args.grad.iter().zip(x).map(|(g, x)| g * x).collect();
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x * factor);
        Ok(self.custom(
            "scale",
            &[a],
            out,
            Box::new(move |args| Ok(vec![args.grad.iter().map(|g| g * factor).collect()])),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        // exact zeros come from structurally empty regions and never move
        let margin = x
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let out = map(x, |v| v.max(0.0));
        self.note_kink(margin);
        Ok(self.custom(
            "relu",
            &[a],
            out,
            Box::new(|args| {
                let x = args.inputs[0].data();
                Ok(vec![args
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect()])
            }),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), sigmoid);
        Ok(self.custom(
            "sigmoid",
            &[a],
            out,
            Box::new(|args| {
                let y = args.output.data();
                Ok(vec![args
                    .grad
                    .iter()
                    .zip(y)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect()])
            }),
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), f64::tanh);
        Ok(self.custom(
            "tanh",
            &[a],
            out,
            Box::new(|args| {
                let y = args.output.data();
                Ok(vec![args
                    .grad
                    .iter()
                    .zip(y)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect()])
            }),
        ))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), f64::exp);
        Ok(self.custom(
            "exp",
            &[a],
            out,
            Box::new(|args| {
                let y = args.output.data();
                Ok(vec![args.grad.iter().zip(y).map(|(g, y)| g * y).collect()])
            }),
        ))
    }

    // ---- row broadcasts -----------------------------------------------

    /// `x[.., d] + b[d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.len() != d {
            return Err(Error::shape("add_bias", &[xv.shape(), bv.shape()]));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
        }
        Ok(self.custom(
            "add_bias",
            &[x, b],
            out,
            Box::new(move |args| {
                let mut gb = vec![0.0; d];
                if args.needs[1] {
                    for row in args.grad.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
                Ok(vec![args.grad.to_vec(), gb])
            }),
        ))
    }

    /// `x[.., d] * s[d]`.
    pub fn mul_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let d = xv.last_dim();
        if sv.len() != d {
            return Err(Error::shape("mul_cols", &[xv.shape(), sv.shape()]));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(sv.data()).for_each(|(o, s)| *o *= s);
        }
        Ok(self.custom(
            "mul_cols",
            &[x, s],
            out,
            Box::new(move |args| {
                let (xd, sd) = (args.inputs[0].data(), args.inputs[1].data());
                let mut gx = vec![0.0; xd.len()];
                let mut gs = vec![0.0; d];
                for ((gr, xr), gxr) in args.grad.chunks(d).zip(xd.chunks(d)).zip(gx.chunks_mut(d)) {
                    for j in 0..d {
                        gxr[j] = gr[j] * sd[j];
                        gs[j] += gr[j] * xr[j];
                    }
                }
                Ok(vec![gx, gs])
            }),
        ))
    }

    /// Repeats `x[B, d]` along a new point axis: `[B, n, d]`.
    pub fn expand_points(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || n == 0 {
            return Err(Error::shape("expand_points", &[xv.shape(), &[n]]));
        }
        let (b, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(b * n * d);
        for row in xv.data().chunks(d) {
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
        let out = Tensor::new(&[b, n, d], out)?;
        Ok(self.custom(
            "expand_points",
            &[x],
            out,
            Box::new(move |args| {
                let mut gx = vec![0.0; b * d];
                for (bi, block) in args.grad.chunks(n * d).enumerate() {
                    let acc = &mut gx[bi * d..(bi + 1) * d];
                    for row in block.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
                Ok(vec![gx])
            }),
        ))
    }

    // ---- linear algebra -----------------------------------------------

    /// `a[m, k] @ b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", &[av.shape(), bv.shape()]));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::new(&[m, n], gemm(av.data(), bv.data(), m, k, n))?;
        Ok(self.custom(
            "matmul",
            &[a, b],
            out,
            Box::new(move |args| {
                let (ad, bd) = (args.inputs[0].data(), args.inputs[1].data());
                let ga = if args.needs[0] {
                    gemm_bt(args.grad, bd, m, n, k)
                } else {
                    Vec::new()
                };
                let gb = if args.needs[1] {
                    gemm_at(ad, args.grad, m, k, n)
                } else {
                    Vec::new()
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// `x[.., d_in] @ w[d_in, d_out] + b[d_out]` applied to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let din = xv.last_dim();
        if wv.rank() != 2 || wv.shape()[0] != din {
            return Err(Error::shape("affine", &[xv.shape(), wv.shape()]));
        }
        let dout = wv.shape()[1];
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(Error::shape(
                    "affine",
                    &[xv.shape(), wv.shape(), self.shape(b)],
                ));
            }
        }
        let rows = xv.rows();
        let mut data = gemm(xv.data(), wv.data(), rows, din, dout);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in data.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.custom(
            "affine",
            &inputs,
            out,
            Box::new(move |args| {
                let (xd, wd) = (args.inputs[0].data(), args.inputs[1].data());
                let gx = if args.needs[0] {
                    gemm_bt(args.grad, wd, rows, dout, din)
                } else {
                    Vec::new()
                };
                let gw = if args.needs[1] {
                    gemm_at(xd, args.grad, rows, din, dout)
                } else {
                    Vec::new()
                };
                let mut out = vec![gx, gw];
                if args.inputs.len() == 3 {
                    let mut gb = vec![0.0; dout];
                    for row in args.grad.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    out.push(gb);
                }
                Ok(out)
            }),
        ))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let n = self.value(a).len();
        Ok(self.custom(
            "sum",
            &[a],
            Tensor::scalar(s),
            Box::new(move |args| Ok(vec![vec![args.grad[0]; n]])),
        ))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n as f64;
        Ok(self.custom(
            "mean",
            &[a],
            Tensor::scalar(s),
            Box::new(move |args| Ok(vec![vec![args.grad[0] / n as f64; n]])),
        ))
    }

    /// Maximum over the last axis. The full cotangent goes to the first
    /// maximal element of each row.
    pub fn max_last(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let d = xv.last_dim();
        let mut winners = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.rows());
        let mut margin = f64::INFINITY;
        for row in xv.data().chunks(d) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            for (j, &v) in row.iter().enumerate() {
                if j != best && v != row[best] {
                    margin = margin.min(row[best] - v);
                }
            }
            winners.push(best);
            out.push(row[best]);
        }
        let mut shape = xv.shape().to_vec();
        if shape.len() > 1 {
            shape.pop();
        } else {
            shape = vec![1];
        }
        let out = Tensor::new(&shape, out)?;
        self.note_kink(margin);
        Ok(self.custom(
            "max_last",
            &[a],
            out,
            Box::new(move |args| {
                let mut gx = vec![0.0; winners.len() * d];
                for (r, (&w, g)) in winners.iter().zip(args.grad).enumerate() {
                    gx[r * d + w] = *g;
                }
                Ok(vec![gx])
            }),
        ))
    }

    // ---- shape --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.custom(
            "reshape",
            &[a],
            out,
            Box::new(|args| Ok(vec![args.grad.to_vec()])),
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(Error::shape("concat", &shapes));
            }
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        Ok(self.custom(
            "concat",
            parts,
            out,
            Box::new(move |args| {
                let mut outs: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|w| Vec::with_capacity(rows * w))
                    .collect();
                for row in args.grad.chunks(total) {
                    let mut off = 0;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&row[off..off + w]);
                        off += w;
                    }
                }
                Ok(outs)
            }),
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(a);
        let d = xv.last_dim();
        if start >= end || end > d {
            return Err(Error::shape("slice_last", &[xv.shape(), &[start, end]]));
        }
        let w = end - start;
        let data: Vec<f64> = xv
            .data()
            .chunks(d)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let out = Tensor::new(&shape, data)?;
        Ok(self.custom(
            "slice_last",
            &[a],
            out,
            Box::new(move |args| {
                let rows = args.grad.len() / w;
                let mut gx = vec![0.0; rows * d];
                for (r, g) in args.grad.chunks(w).enumerate() {
                    gx[r * d + start..r * d + end].copy_from_slice(g);
                }
                Ok(vec![gx])
            }),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("same shape")
}

/// `a[m, k] @ b[k, n]`.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for (arow, crow) in a.chunks(k).zip(c.chunks_mut(n)) {
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
        }
    }
    c
}

/// `g[m, n] @ b[k, n]^T` → `[m, k]`.
pub fn gemm_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for (grow, crow) in g.chunks(n).zip(c.chunks_mut(k)) {
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *cv = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[m, k]^T @ g[m, n]` → `[k, n]`.
pub fn gemm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let grow = &g[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            c[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(c, g)| *c += av * g);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 3.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0]);
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2]") && err.contains("[3]"),
            "{err}"
        );
        let m = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(m, m).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn custom_identity_and_doubling() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -3.0]));
        let id = tape.custom(
            "identity",
            &[x],
            tape.value(x).clone(),
            Box::new(|a| Ok(vec![a.grad.to_vec()])),
        );
        let doubled = tape.value(id).data().iter().map(|v| 2.0 * v).collect();
        let y = tape.custom(
            "double",
            &[id],
            Tensor::new(&[2], doubled).unwrap(),
            Box::new(|a| Ok(vec![a.grad.iter().map(|g| 2.0 * g).collect()])),
        );
        assert_eq!(tape.value(y).data(), &[2.0, -6.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn custom_cotangent_shape_checked() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.custom(
            "bad",
            &[x],
            t(&[2], &[1.0, 2.0]),
            Box::new(|_| Ok(vec![vec![1.0; 3]])),
        );
        let s = tape.sum(y).unwrap();
        assert!(matches!(
            tape.backward(s),
            Err(Error::Cotangent {
                got: 3,
                expected: 2,
                ..
            })
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        // x feeds three consumers; its gradient is the sum of the three
        // single-consumer gradients.
        let x0 = t(&[3], &[0.5, -1.5, 2.0]);
        let single = |k: usize| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let y = match k {
                0 => tape.mul(x, x).unwrap(),
                1 => tape.sigmoid(x).unwrap(),
                _ => tape.scale(x, 3.0).unwrap(),
            };
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap().get(x).unwrap().to_vec()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let a = tape.mul(x, x).unwrap();
        let b = tape.sigmoid(x).unwrap();
        let c = tape.scale(x, 3.0).unwrap();
        let ab = tape.add(a, b).unwrap();
        let abc = tape.add(ab, c).unwrap();
        let s = tape.sum(abc).unwrap();
        let got = tape.backward(s).unwrap().get(x).unwrap().to_vec();
        for i in 0..3 {
            let expect = single(0)[i] + single(1)[i] + single(2)[i];
            assert!((got[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn max_last_routes_to_first_winner() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 5.0, 5.0, -2.0, -1.0, -3.0]));
        let m = tape.max_last(x).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, -1.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
