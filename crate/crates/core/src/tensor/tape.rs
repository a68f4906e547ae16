//! Reverse-mode differentiation over a linear tape of operation records.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes in strict reverse order of creation, so each node's
//! gradient is complete before it is propagated to its inputs.

use crate::error::{Error, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter inside a `ParamStore`.
pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k-1)/2` on each side.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// 1×1, stride 1, unpadded: the input buffer already is the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

#[derive(Clone, Debug)]
struct ResizeTaps {
    // (low index, high index, weight of high)
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

enum Op<T: Real> {
    Input,
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Resize {
        x: Var,
        taps: ResizeTaps,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        p: Var,
        target: Tensor<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Probabilities are clamped below at this value before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` returns all-`None` gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is propagated to it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (h, w, cin) = self.value(x).hwc()?;
        let &[kh, kw, kcin, cout] = self.shape(kernel) else {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "kernel rank",
                expected: 4,
                got: self.shape(kernel).len(),
            });
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Invalid(format!("conv2d: kernel extents {kh}×{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be positive".into()));
        }
        if kcin != cin {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input channels",
                expected: kcin,
                got: cin,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: "bias channels",
                    expected: cout,
                    got: self.value(b).len(),
                });
            }
        }
        let (ph, pw) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "spatial",
                expected: kh,
                got: h.min(w),
            });
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / stride + 1,
            ow: (w + 2 * pw - kw) / stride + 1,
        };
        let rows = geom.oh * geom.ow;
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            im2col(self.value(x).data(), &geom)
        };
        let mut out = vec![T::zero(); rows * cout];
        {
            let patches = if geom.is_pointwise() { self.value(x).data() } else { &cols };
            gemm(false, false, rows, geom.patch(), cout, patches, self.value(kernel).data(), T::zero(), &mut out);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        let value = Tensor::new([geom.oh, geom.ow, cout], out)?;
        let cols = if rg && self.grad_enabled { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k: kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                axis: "inner",
                expected: k,
                got: k2,
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::Matmul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "transpose")?;
        let value = transpose2(self.value(x).data(), m, n);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([n, m], value)?, Op::Transpose { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product. `b` may also be a single-channel map broadcast
    /// across the channels (last axis) of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let broadcast = if sa == sb {
            false
        } else if sa.len() == sb.len()
            && sb.last() == Some(&1)
            && sa[..sa.len() - 1] == sb[..sb.len() - 1]
        {
            true
        } else {
            return Err(self.shape_err("mul", a, b));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let data = if broadcast {
            let c = *av.shape().last().unwrap_or(&1);
            let mut out = Vec::with_capacity(av.len());
            for (row, &g) in av.data().chunks_exact(c.max(1)).zip(bv.data()) {
                out.extend(row.iter().map(|&v| v * g));
            }
            out
        } else {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b, broadcast }, rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(self.shape_err("add_bias", x, b));
        }
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(value, Op::AddBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Softmax over the last axis (channels of an `H×W×K` map, rows of a matrix).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = *self.shape(x).last().unwrap_or(&0);
        if k == 0 {
            return Err(Error::Invalid("softmax over an empty axis".into()));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Per-pixel channel softmax of an `H×W×K` map, `K ≥ 2`.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let (_, _, k) = self.value(x).hwc()?;
        if k < 2 {
            return Err(Error::Dimension {
                op: "softmax_channel",
                axis: "channels",
                expected: 2,
                got: k,
            });
        }
        self.softmax(x)
    }

    /// Concatenates along the last axis; `a` occupies the leading channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.shape_err("concat", a, b));
        }
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { a, b }, rg))
    }

    /// Metadata-only reshape.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Bilinear resampling of an `H×W×K` map (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, k) = self.value(x).hwc()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Invalid("resize: target extents must be positive".into()));
        }
        let taps = ResizeTaps {
            rows: bilinear_taps(h, out_h),
            cols: bilinear_taps(w, out_w),
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); out_h * out_w * k];
        for (oy, &(y0, y1, fy)) in taps.rows.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in taps.cols.iter().enumerate() {
                let fx = T::lit(fx);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let o = &mut out[(oy * out_w + ox) * k..][..k];
                let p00 = &src[(y0 * w + x0) * k..][..k];
                let p01 = &src[(y0 * w + x1) * k..][..k];
                let p10 = &src[(y1 * w + x0) * k..][..k];
                let p11 = &src[(y1 * w + x1) * k..][..k];
                for c in 0..k {
                    o[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([out_h, out_w, k], out)?, Op::Resize { x, taps }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    /// `−(1/M) Σ_k target_k · log(max(p_k, 1e-12))` with `M` the element count.
    pub fn cross_entropy(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(p).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let m = T::lit(target.len().max(1) as f64);
        let clamp = T::lit(LOG_CLAMP);
        let total: T = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &t)| t != T::zero())
            .map(|(&pk, &t)| t * pk.max(clamp).ln())
            .sum();
        let rg = self.any_grad(&[p]);
        Ok(self.push(
            Tensor::scalar(-total / m),
            Op::CrossEntropy {
                p,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            total += T::lit(w) * self.value(v).item()?;
        }
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, w)| (v, T::lit(w))).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms }, rg))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                x,
                k,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.oh * geom.ow;
                let patch = geom.patch();
                let xv = self.value(*x);
                if self.needs(*k) {
                    let patches = if geom.is_pointwise() { xv.data() } else { cols.as_slice() };
                    let mut dk = vec![T::zero(); patch * geom.cout];
                    gemm(true, false, patch, rows, geom.cout, patches, gd, T::zero(), &mut dk);
                    accumulate(grads, *k, self.value(*k).shape(), dk);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); geom.cout];
                        for row in gd.chunks_exact(geom.cout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, &[geom.cout], db);
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(false, true, rows, geom.cout, patch, gd, self.value(*k).data(), T::zero(), &mut dcols);
                    let dx = if geom.is_pointwise() { dcols } else { col2im(&dcols, geom) };
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::Matmul { a, b } => {
                let (m, kk) = matrix_dims(self.value(*a), "matmul").expect("checked");
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * kk];
                    gemm(false, true, m, n, kk, gd, self.value(*b).data(), T::zero(), &mut da);
                    accumulate(grads, *a, &[m, kk], da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); kk * n];
                    gemm(true, false, kk, m, n, self.value(*a).data(), gd, T::zero(), &mut db);
                    accumulate(grads, *b, &[kk, n], db);
                }
            }
            Op::Transpose { x } => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                accumulate(grads, *x, self.value(*x).shape(), transpose2(gd, m, n));
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if *broadcast {
                    let c = *g.shape().last().unwrap_or(&1);
                    if self.needs(*a) {
                        let da = gd
                            .chunks_exact(c)
                            .zip(bv)
                            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
                            .collect();
                        accumulate(grads, *a, g.shape(), da);
                    }
                    if self.needs(*b) {
                        let db = gd
                            .chunks_exact(c)
                            .zip(av.chunks_exact(c))
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                            .collect();
                        accumulate(grads, *b, self.value(*b).shape(), db);
                    }
                } else {
                    if self.needs(*a) {
                        let da = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                        accumulate(grads, *a, g.shape(), da);
                    }
                    if self.needs(*b) {
                        let db = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                        accumulate(grads, *b, g.shape(), db);
                    }
                }
            }
            Op::AddBias { x, b } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.shape(), gd.to_vec());
                }
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks_exact(c.max(1)) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, &[c], db);
                }
            }
            Op::Relu { x } => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Sigmoid { x } => {
                let dx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Softmax { x } => {
                let k = *g.shape().last().unwrap();
                let mut dx = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks_exact(k).zip(node.value.data().chunks_exact(k)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &y)| y * (gv - dot)));
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Concat { a, b } => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = gd.len() / (ca + cb).max(1);
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        da.extend_from_slice(&gd[r * (ca + cb)..][..ca]);
                    }
                    accumulate(grads, *a, self.value(*a).shape(), da);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        db.extend_from_slice(&gd[r * (ca + cb) + ca..][..cb]);
                    }
                    accumulate(grads, *b, self.value(*b).shape(), db);
                }
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.value(*x).shape(), gd.to_vec());
            }
            Op::Resize { x, taps } => {
                let (h, w, k) = self.value(*x).hwc().expect("checked");
                let out_w = taps.cols.len();
                let mut dx = vec![T::zero(); h * w * k];
                for (oy, &(y0, y1, fy)) in taps.rows.iter().enumerate() {
                    let fy = T::lit(fy);
                    for (ox, &(x0, x1, fx)) in taps.cols.iter().enumerate() {
                        let fx = T::lit(fx);
                        let gpix = &gd[(oy * out_w + ox) * k..][..k];
                        for (yy, xx, wt) in [
                            (y0, x0, (T::one() - fy) * (T::one() - fx)),
                            (y0, x1, (T::one() - fy) * fx),
                            (y1, x0, fy * (T::one() - fx)),
                            (y1, x1, fy * fx),
                        ] {
                            let d = &mut dx[(yy * w + xx) * k..][..k];
                            for c in 0..k {
                                d[c] += wt * gpix[c];
                            }
                        }
                    }
                }
                accumulate(grads, *x, &[h, w, k], dx);
            }
            Op::Sum { x } => {
                let s = gd[0];
                let n = self.value(*x).len();
                accumulate(grads, *x, self.value(*x).shape(), vec![s; n]);
            }
            Op::CrossEntropy { p, target } => {
                let m = T::lit(target.len().max(1) as f64);
                let clamp = T::lit(LOG_CLAMP);
                let s = gd[0];
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&pk, &t)| {
                        if t == T::zero() || pk <= clamp {
                            T::zero()
                        } else {
                            -s * t / (m * pk)
                        }
                    })
                    .collect();
                accumulate(grads, *p, target.shape(), dp);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        accumulate(grads, v, self.value(v).shape(), vec![w * gd[0]]);
                    }
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every parameter node, summed per `ParamId`, in a vector
    /// indexed by id (`None` when the parameter did not contribute).
    pub fn param_grads(&self, tape: &Tape<T>, n_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                match &mut out[*id] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(data) {
                *a += d;
            }
        }
        slot => *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape")),
    }
}

fn matrix_dims<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Dimension {
            op,
            axis: "rank",
            expected: 2,
            got: t.rank(),
        }),
    }
}

fn transpose2<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Folds `xs` over eight interleaved accumulators so the loop vectorizes.
fn lane_reduce<T: Real>(xs: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    const LANES: usize = 8;
    let mut acc = [init; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for j in 0..LANES {
            acc[j] = f(acc[j], c[j]);
        }
    }
    let head = acc.into_iter().reduce(&f).unwrap_or(init);
    rest.iter().fold(head, |a, &b| f(a, b))
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = lane_reduce(row, T::neg_infinity(), |a, b| if b > a { b } else { a });
    for v in row.iter_mut() {
        *v -= max;
    }
    T::exp_in_place(row);
    // Weights below ε² of the largest are flushed so the row stays out of the
    // subnormal range, where arithmetic is very slow.
    let floor = T::epsilon() * T::epsilon();
    for v in row.iter_mut() {
        if *v < floor {
            *v = T::zero();
        }
    }
    let inv = lane_reduce(row, T::zero(), |a, b| a + b).recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.oh * g.ow * patch];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * g.w + ix as usize) * g.cin..][..g.cin];
                    row[(ky * g.kw + kx) * g.cin..][..g.cin].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = &mut x[(iy as usize * g.w + ix as usize) * g.cin..][..g.cin];
                    for (d, &s) in dst.iter_mut().zip(&row[(ky * g.kw + kx) * g.cin..][..g.cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Half-pixel-center bilinear taps from `n_in` samples to `n_out` samples.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Nearest-neighbour resampling of an `H×W×K` map; not differentiable.
pub fn resize_nearest<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, k) = x.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("resize: target extents must be positive".into()));
    }
    let pick = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut out = Vec::with_capacity(out_h * out_w * k);
    for oy in 0..out_h {
        let sy = pick(oy, h, out_h);
        for ox in 0..out_w {
            let sx = pick(ox, w, out_w);
            out.extend_from_slice(&x.data()[(sy * w + sx) * k..][..k]);
        }
    }
    Tensor::new([out_h, out_w, k], out)
}
