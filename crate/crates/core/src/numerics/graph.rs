use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Epsilon clamp inside log and L2-normalization denominators.
pub const EPS: f32 = 1e-12;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[f32]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackFn>,
    grad: Option<Vec<f32>>,
    is_leaf: bool,
}

/// Reverse-mode tape. Operations append nodes in topological order; one
/// backward pass walks the tape in reverse exactly once. A graph is built
/// per training step and dropped afterwards.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    strict: bool,
    backward_done: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), strict: false, backward_done: Cell::new(false) }
    }

    /// Strict mode turns non-finite op outputs into hard errors.
    pub fn strict() -> Self {
        Graph { strict: true, ..Graph::new() }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: vec![],
            requires_grad,
            backward: None,
            grad: None,
            is_leaf: true,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Gradient accumulated on a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn record(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: BackFn,
    ) -> Result<Var> {
        if self.strict && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            parents,
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
            grad: None,
            is_leaf: false,
        }))
    }

    /// Reverse pass from a scalar loss. Every leaf with `requires_grad`
    /// receives d(loss)/d(leaf); gradients accumulate additively across uses.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        {
            let nodes = self.nodes.borrow();
            let t = &nodes[loss.0].value;
            if !t.is_scalar() {
                return Err(Error::NonScalarLoss { shape: t.shape().to_vec() });
            }
        }
        self.backward_done.set(true);
        let mut nodes = self.nodes.borrow_mut();
        for n in nodes.iter_mut() {
            if n.is_leaf && n.requires_grad {
                n.grad = Some(vec![0.0; n.value.numel()]);
            } else {
                n.grad = None;
            }
        }
        nodes[loss.0].grad = Some(vec![1.0; 1]);
        for i in (0..nodes.len()).rev() {
            let Some(out_grad) = nodes[i].grad.take() else {
                continue;
            };
            if nodes[i].is_leaf {
                nodes[i].grad = Some(out_grad);
                continue;
            }
            let (parents, contribs) = {
                let n = &nodes[i];
                let Some(back) = n.backward.as_ref() else {
                    continue;
                };
                (n.parents.clone(), back(&out_grad))
            };
            for (p, contrib) in parents.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                let pn = &mut nodes[*p];
                if !pn.requires_grad {
                    continue;
                }
                match pn.grad.as_mut() {
                    Some(g) => {
                        for (gi, ci) in g.iter_mut().zip(contrib.data()) {
                            *gi += ci;
                        }
                    }
                    None => pn.grad = Some(contrib.into_data()),
                }
            }
        }
        Ok(())
    }

    // ── pointwise ops ────────────────────────────────────────────────

    fn unary(
        &self,
        op: &'static str,
        a: Var,
        f: impl Fn(f32) -> f32,
        // derivative as a function of (input, output)
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let y = Tensor::new(x.shape().to_vec(), data)?;
        let y_rc = Rc::new(y.clone());
        let back: BackFn = Box::new(move |og| {
            let d = x
                .data()
                .iter()
                .zip(y_rc.data())
                .zip(og)
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
        });
        self.record(op, y, vec![a.0], back)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f32::exp, |_, y| y)
    }

    /// Natural log with the argument clamped at [`EPS`].
    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.max(EPS).ln(), |x, _| 1.0 / x.max(EPS))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f32::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        const A: f32 = 0.044_715;
        self.unary(
            "gelu",
            a,
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + A * x * x * x);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, a: Var, c: f32) -> Result<Var> {
        self.unary("scale", a, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: f32) -> Result<Var> {
        self.unary("add_scalar", a, move |x| x + c, |_, _| 1.0)
    }

    // ── binary ops ───────────────────────────────────────────────────

    /// Elementwise add. The right operand may also be a length-c vector
    /// broadcast across the rows of an [r, c] left operand (bias add).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let x = self.value(a);
        let y = self.value(b);
        if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
            let out = Tensor::new(x.shape().to_vec(), data)?;
            let xs = x.shape().to_vec();
            let back: BackFn = Box::new(move |og| {
                let g = Tensor::new(xs.clone(), og.to_vec()).unwrap();
                vec![Some(g.clone()), Some(g)]
            });
            return self.record("add", out, vec![a.0, b.0], back);
        }
        let (rows, cols) = x.as_2d();
        if y.numel() == cols && y.shape().len() == 1 {
            let mut data = x.data().to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += y.data()[c];
                }
            }
            let out = Tensor::new(x.shape().to_vec(), data)?;
            let xs = x.shape().to_vec();
            let back: BackFn = Box::new(move |og| {
                let ga = Tensor::new(xs.clone(), og.to_vec()).unwrap();
                let mut gb = vec![0.0f32; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += og[r * cols + c];
                    }
                }
                vec![Some(ga), Some(Tensor::from_vec(gb))]
            });
            return self.record("add", out, vec![a.0, b.0], back);
        }
        Err(Error::ShapeMismatch { op: "add", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// Elementwise multiply (same shape).
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let x = self.value(a);
        let y = self.value(b);
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let back: BackFn = Box::new(move |og| {
            let ga = og.iter().zip(y.data()).map(|(g, q)| g * q).collect();
            let gb = og.iter().zip(x.data()).map(|(g, p)| g * p).collect();
            vec![
                Some(Tensor::new(x.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(y.shape().to_vec(), gb).unwrap()),
            ]
        });
        self.record("mul", out, vec![a.0, b.0], back)
    }

    /// Elementwise divide (same shape).
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let x = self.value(a);
        let y = self.value(b);
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "div",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p / q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let back: BackFn = Box::new(move |og| {
            let ga: Vec<f32> = og.iter().zip(y.data()).map(|(g, q)| g / q).collect();
            let gb = og
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(g, (p, q))| -g * p / (q * q))
                .collect();
            vec![
                Some(Tensor::new(x.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(y.shape().to_vec(), gb).unwrap()),
            ]
        });
        self.record("div", out, vec![a.0, b.0], back)
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// C = A · B for 2-D operands.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// C = A · Bᵀ (used by attention scores).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let x = self.value(a);
        let y = self.value(b);
        let (m, k) = x.dims2()?;
        let (br, bc) = y.dims2()?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: if transpose_b { "matmul_nt" } else { "matmul" },
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let b_rm = if transpose_b { transpose(y.data(), br, bc) } else { y.data().to_vec() };
        let out_data = raw_matmul(x.data(), m, k, &b_rm, n);
        let out = Tensor::new(vec![m, n], out_data)?;
        let back: BackFn = Box::new(move |og| {
            // dA = dC · Bᵀ  (B in row-major [k, n] form here)
            let bt = transpose(&b_rm, k, n);
            let ga = raw_matmul(og, m, n, &bt, k);
            // dB(row-major) = Aᵀ · dC, shape [k, n]
            let at = transpose(x.data(), m, k);
            let gb_rm = raw_matmul(&at, k, m, og, n);
            let gb = if transpose_b { transpose(&gb_rm, k, n) } else { gb_rm };
            vec![
                Some(Tensor::new(vec![m, k], ga).unwrap()),
                Some(Tensor::new(y.shape().to_vec(), gb).unwrap()),
            ]
        });
        self.record("matmul", out, vec![a.0, b.0], back)
    }

    // ── softmax / normalization ──────────────────────────────────────

    /// Softmax with temperature along the last axis, row-max subtracted
    /// before exponentiation.
    pub fn softmax_t(&self, a: Var, tau: f32) -> Result<Var> {
        if tau <= 0.0 {
            return Err(Error::invalid("softmax_t", format!("temperature must be > 0, got {tau}")));
        }
        let x = self.value(a);
        let (rows, cols) = x.as_2d();
        if cols == 0 {
            return Err(Error::invalid("softmax_t", "empty last axis"));
        }
        let mut data = vec![0.0f32; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b / tau));
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] / tau - mx).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let y = Rc::new(out.clone());
        let shape = x.shape().to_vec();
        let back: BackFn = Box::new(move |og| {
            let mut d = vec![0.0f32; y.numel()];
            for r in 0..rows {
                let yr = &y.data()[r * cols..(r + 1) * cols];
                let gr = &og[r * cols..(r + 1) * cols];
                let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for c in 0..cols {
                    d[r * cols + c] = yr[c] * (gr[c] - dot) / tau;
                }
            }
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        });
        self.record("softmax_t", out, vec![a.0], back)
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.softmax_t(a, 1.0)
    }

    /// Layer normalization over the last axis with learned gain and offset.
    pub fn layer_norm(&self, a: Var, gain: Var, offset: Var, eps: f32) -> Result<Var> {
        let x = self.value(a);
        let g = self.value(gain);
        let b = self.value(offset);
        let (rows, cols) = x.as_2d();
        if g.numel() != cols || b.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; x.numel()];
        let mut xhat = vec![0.0f32; x.numel()];
        let mut inv_std = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let h = (row[c] - mean) * istd;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out_t = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        let back: BackFn = Box::new(move |og| {
            let mut dx = vec![0.0f32; xhat.len()];
            let mut dg = vec![0.0f32; cols];
            let mut db = vec![0.0f32; cols];
            for r in 0..rows {
                let h = &xhat[r * cols..(r + 1) * cols];
                let gr = &og[r * cols..(r + 1) * cols];
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for c in 0..cols {
                    let d = gr[c] * g.data()[c];
                    mean_d += d;
                    mean_dh += d * h[c];
                    dg[c] += gr[c] * h[c];
                    db[c] += gr[c];
                }
                mean_d /= cols as f32;
                mean_dh /= cols as f32;
                for c in 0..cols {
                    let d = gr[c] * g.data()[c];
                    dx[r * cols + c] = (d - mean_d - h[c] * mean_dh) * inv_std[r];
                }
            }
            vec![
                Some(Tensor::new(shape.clone(), dx).unwrap()),
                Some(Tensor::from_vec(dg)),
                Some(Tensor::from_vec(db)),
            ]
        });
        self.record("layer_norm", out_t, vec![a.0, gain.0, offset.0], back)
    }

    /// L2-normalize each row (last axis); zero rows stay zero via the
    /// [`EPS`] clamp inside the denominator.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.as_2d();
        let mut out = vec![0.0f32; x.numel()];
        let mut inv_norm = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let n = (row.iter().map(|v| v * v).sum::<f32>() + EPS).sqrt();
            inv_norm[r] = 1.0 / n;
            for c in 0..cols {
                out[r * cols + c] = row[c] / n;
            }
        }
        let out_t = Tensor::new(x.shape().to_vec(), out)?;
        let y = Rc::new(out_t.clone());
        let shape = x.shape().to_vec();
        let back: BackFn = Box::new(move |og| {
            let mut dx = vec![0.0f32; y.numel()];
            for r in 0..rows {
                let yr = &y.data()[r * cols..(r + 1) * cols];
                let gr = &og[r * cols..(r + 1) * cols];
                let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for c in 0..cols {
                    dx[r * cols + c] = (gr[c] - yr[c] * dot) * inv_norm[r];
                }
            }
            vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
        });
        self.record("l2_normalize", out_t, vec![a.0], back)
    }

    // ── structure ops ────────────────────────────────────────────────

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, x.data().to_vec())?;
        let xs = x.shape().to_vec();
        let back: BackFn =
            Box::new(move |og| vec![Some(Tensor::new(xs.clone(), og.to_vec()).unwrap())]);
        self.record("reshape", out, vec![a.0], back)
    }

    /// Rows [r0, r1) of a 2-D tensor.
    pub fn slice_rows(&self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2()?;
        if r0 >= r1 || r1 > rows {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {r0}..{r1} out of bounds for {rows} rows"),
            ));
        }
        let out = Tensor::new(vec![r1 - r0, cols], x.data()[r0 * cols..r1 * cols].to_vec())?;
        let back: BackFn = Box::new(move |og| {
            let mut d = vec![0.0f32; rows * cols];
            d[r0 * cols..r1 * cols].copy_from_slice(og);
            vec![Some(Tensor::new(vec![rows, cols], d).unwrap())]
        });
        self.record("slice_rows", out, vec![a.0], back)
    }

    /// Columns [c0, c1) of a 2-D tensor.
    pub fn slice_cols(&self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2()?;
        if c0 >= c1 || c1 > cols {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {c0}..{c1} out of bounds for {cols} columns"),
            ));
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * cols + c0..r * cols + c1]);
        }
        let out = Tensor::new(vec![rows, w], data)?;
        let back: BackFn = Box::new(move |og| {
            let mut d = vec![0.0f32; rows * cols];
            for r in 0..rows {
                d[r * cols + c0..r * cols + c1].copy_from_slice(&og[r * w..(r + 1) * w]);
            }
            vec![Some(Tensor::new(vec![rows, cols], d).unwrap())]
        });
        self.record("slice_cols", out, vec![a.0], back)
    }

    /// Concatenate 2-D tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no operands"));
        }
        if axis > 1 {
            return Err(Error::invalid("concat", format!("axis {axis} not in {{0,1}}")));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let mut dims = Vec::with_capacity(vals.len());
        for v in &vals {
            dims.push(v.dims2()?);
        }
        let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
        for (i, d) in dims.iter().enumerate() {
            let f = if axis == 0 { d.1 } else { d.0 };
            if f != fixed {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: vals[0].shape().to_vec(),
                    rhs: vals[i].shape().to_vec(),
                });
            }
        }
        let out = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * fixed);
            for v in &vals {
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, fixed], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(fixed * cols);
            for r in 0..fixed {
                for (v, d) in vals.iter().zip(&dims) {
                    data.extend_from_slice(&v.data()[r * d.1..(r + 1) * d.1]);
                }
            }
            Tensor::new(vec![fixed, cols], data)?
        };
        let parents = parts.iter().map(|p| p.0).collect();
        let back: BackFn = Box::new(move |og| {
            let mut grads = Vec::with_capacity(dims.len());
            if axis == 0 {
                let mut offset = 0;
                for d in &dims {
                    let len = d.0 * fixed;
                    grads.push(Some(
                        Tensor::new(vec![d.0, fixed], og[offset..offset + len].to_vec()).unwrap(),
                    ));
                    offset += len;
                }
            } else {
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut col0 = 0;
                for d in &dims {
                    let mut g = Vec::with_capacity(fixed * d.1);
                    for r in 0..fixed {
                        g.extend_from_slice(&og[r * total + col0..r * total + col0 + d.1]);
                    }
                    grads.push(Some(Tensor::new(vec![d.0, d.1], g).unwrap()));
                    col0 += d.1;
                }
            }
            grads
        });
        self.record("concat", out, parents, back)
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::scalar(x.data().iter().sum());
        let xs = x.shape().to_vec();
        let n = x.numel();
        let back: BackFn =
            Box::new(move |og| vec![Some(Tensor::new(xs.clone(), vec![og[0]; n]).unwrap())]);
        self.record("sum_all", out, vec![a.0], back)
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Sum along an axis of a 2-D tensor. Axis 0 collapses rows
    /// (output length = cols); axis 1 collapses columns.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", a, axis, Reduce::Sum)
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", a, axis, Reduce::Mean)
    }

    pub fn max_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("max_axis", a, axis, Reduce::Max)
    }

    fn reduce_axis(&self, op: &'static str, a: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2()?;
        if axis > 1 {
            return Err(Error::invalid(op, format!("axis {axis} not in {{0,1}}")));
        }
        let out_len = if axis == 0 { cols } else { rows };
        let red_len = if axis == 0 { rows } else { cols };
        let at = |i: usize, j: usize| {
            // i indexes the kept axis, j the reduced one
            if axis == 0 {
                x.data()[j * cols + i]
            } else {
                x.data()[i * cols + j]
            }
        };
        let mut out = vec![0.0f32; out_len];
        let mut argmax = vec![0usize; out_len];
        for i in 0..out_len {
            match kind {
                Reduce::Sum | Reduce::Mean => {
                    let mut s = 0.0;
                    for j in 0..red_len {
                        s += at(i, j);
                    }
                    out[i] = if matches!(kind, Reduce::Mean) { s / red_len as f32 } else { s };
                }
                Reduce::Max => {
                    let mut best = f32::NEG_INFINITY;
                    for j in 0..red_len {
                        let v = at(i, j);
                        if v > best {
                            best = v;
                            argmax[i] = j;
                        }
                    }
                    out[i] = best;
                }
            }
        }
        let out_t = Tensor::from_vec(out);
        let back: BackFn = Box::new(move |og| {
            let mut d = vec![0.0f32; rows * cols];
            let mut put = |i: usize, j: usize, v: f32| {
                if axis == 0 {
                    d[j * cols + i] += v;
                } else {
                    d[i * cols + j] += v;
                }
            };
            for i in 0..out_len {
                match kind {
                    Reduce::Sum => {
                        for j in 0..red_len {
                            put(i, j, og[i]);
                        }
                    }
                    Reduce::Mean => {
                        for j in 0..red_len {
                            put(i, j, og[i] / red_len as f32);
                        }
                    }
                    Reduce::Max => put(i, argmax[i], og[i]),
                }
            }
            vec![Some(Tensor::new(vec![rows, cols], d).unwrap())]
        });
        self.record(op, out_t, vec![a.0], back)
    }
}

#[derive(Clone, Copy)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

fn transpose(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Row-major [m,k] x [k,n] -> [m,n]. Parallelized over output rows; each
/// output element is computed by exactly one task, so results are
/// deterministic regardless of thread count.
fn raw_matmul(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let body = |(row_out, a_row): (&mut [f32], &[f32])| {
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * n * k >= 65_536 {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(body);
    } else {
        out.chunks_mut(n).zip(a.chunks(k)).for_each(body);
    }
    out
}
