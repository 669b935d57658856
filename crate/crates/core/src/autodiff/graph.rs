use super::kernels::{self, bilinear_at, sigmoid, ConvGeometry, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// Inputs below this magnitude are treated as the pole of `log`/`atan2`.
pub const POLE_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Atan2(Var, Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Softmax {
        input: Var,
        cols: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Index(Var, usize),
    Stack(Vec<Var>),
    GlobalAvgPool(Var),
    AffineGrid {
        theta: Var,
        out_h: usize,
        out_w: usize,
    },
    BilinearSample {
        image: Var,
        grid: Var,
        background: f64,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    tracked: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is always a topological order of the dataflow graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Broadcast layout: output shape plus, for each operand, the flat index of
/// the operand element feeding every output element.
struct Broadcast {
    shape: Vec<usize>,
    a_idx: Option<Vec<usize>>,
    b_idx: Option<Vec<usize>>,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast {
            shape: a.to_vec(),
            a_idx: None,
            b_idx: None,
        });
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut shape = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        let d = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
        shape.push(d);
    }
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let n: usize = shape.iter().product();
    let mut a_idx = Vec::with_capacity(n);
    let mut b_idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        a_idx.push(counter.iter().zip(&sa).map(|(c, s)| c * s).sum());
        b_idx.push(counter.iter().zip(&sb).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    let a_idx = (pa != shape).then_some(a_idx);
    let b_idx = (pb != shape).then_some(b_idx);
    Ok(Broadcast {
        shape,
        a_idx,
        b_idx,
    })
}

#[inline]
fn at(idx: &Option<Vec<usize>>, i: usize) -> usize {
    idx.as_ref().map_or(i, |v| v[i])
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

    /// Records a leaf. It is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.tensor.zero_grad());
    }

    fn push(&mut self, tensor: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn make(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced inconsistent shape")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = self.make(t.shape().to_vec(), data);
        let tracked = self.tracked(&[x]);
        self.push(out, op, tracked)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let bc = broadcast(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = bc.shape.iter().product();
        let data = (0..n)
            .map(|i| f(da[at(&bc.a_idx, i)], db[at(&bc.b_idx, i)]))
            .collect();
        let out = self.make(bc.shape, data);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x · c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// Matrix product of `[m, k]` and `[k, n]` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm_acc(self.data(a), self.data(b), &mut data, m, k, n);
        let out = self.make(vec![m, n], data);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b, m, k, n }, tracked))
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights and
    /// an optional `[O]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let mismatch = || Error::Shape {
            op: "conv2d",
            lhs: si.clone(),
            rhs: sw.clone(),
        };
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(mismatch());
        }
        let geom =
            ConvGeometry::new(si[0], si[1], si[2], sw[2], stride, padding).ok_or_else(mismatch)?;
        let o = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let cols = kernels::im2col(self.data(input), &geom);
        let p = geom.cols();
        let mut data = vec![0.0; o * p];
        if let Some(b) = bias {
            for (oc, &bv) in self.data(b).iter().enumerate() {
                data[oc * p..(oc + 1) * p].fill(bv);
            }
        }
        kernels::gemm_acc(self.data(weight), &cols, &mut data, o, geom.rows(), p);
        let out = self.make(vec![o, geom.out_h, geom.out_w], data);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        let cols = if self.is_tracked(weight) {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            tracked,
        ))
    }

    /// Max pooling over non-overlapping or strided `kernel × kernel` windows
    /// of a `[C, H, W]` input (valid padding). Ties go to the first maximum.
    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let geom = (s.len() == 3)
            .then(|| ConvGeometry::new(s[0], s[1], s[2], kernel, stride, Padding::Valid))
            .flatten()
            .ok_or_else(|| Error::Shape {
                op: "max_pool2d",
                lhs: s.clone(),
                rhs: vec![kernel, kernel],
            })?;
        let x = self.data(input);
        let mut data = Vec::with_capacity(s[0] * geom.cols());
        let mut argmax = Vec::with_capacity(data.capacity());
        for c in 0..s[0] {
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let i = (c * s[1] + oy * stride + ki) * s[2] + ox * stride + kj;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let out = self.make(vec![s[0], geom.out_h, geom.out_w], data);
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log with the argument clamped to at least [`POLE_EPS`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(POLE_EPS).ln(), Op::Log(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    /// Elementwise `atan2(y, x)`; points within [`POLE_EPS`] of the origin
    /// evaluate to 0 with zero gradient.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary(
            "atan2",
            y,
            x,
            |y, x| {
                if at_pole(y, x) {
                    0.0
                } else {
                    y.atan2(x)
                }
            },
            Op::Atan2(y, x),
        )
    }

    fn reduce(&mut self, x: Var, value: f64, op: Op) -> Var {
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(value), op, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.reduce(x, s, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.reduce(x, m, Op::Mean(x))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.data(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.reduce(x, n, Op::L2Norm(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.shape().last().copied().unwrap_or(1).max(1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = self.make(t.shape().to_vec(), data);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Softmax { input: x, cols }, tracked)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant
    /// `targets`, computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        Ok(self.reduce(
            logits,
            loss,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.make(shape.to_vec(), t.data().to_vec());
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![],
            });
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = first;
        shape[0] = lead;
        let out = self.make(shape, data);
        let tracked = self.tracked(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), tracked))
    }

    /// Selects one element (flat index) as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let d = self.data(x);
        let v = *d.get(i).ok_or_else(|| Error::Shape {
            op: "index",
            lhs: self.shape(x).to_vec(),
            rhs: vec![i],
        })?;
        Ok(self.reduce(x, v, Op::Index(x, i)))
    }

    /// Packs scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if self.value(s).numel() != 1 {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: vec![],
                    rhs: self.shape(s).to_vec(),
                });
            }
            data.push(self.item(s));
        }
        let out = self.make(vec![scalars.len()], data);
        let tracked = self.tracked(scalars);
        Ok(self.push(out, Op::Stack(scalars.to_vec()), tracked))
    }

    /// Mean over the spatial axes of a `[C, H, W]` tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                lhs: s,
                rhs: vec![],
            });
        }
        let hw = s[1] * s[2];
        let data = self
            .data(x)
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = self.make(vec![s[0]], data);
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), tracked))
    }

    /// Sampling grid for a 2×3 matrix acting on normalized coordinates.
    /// The output is `[out_h, out_w, 2]` holding `(x, y)` source positions in
    /// `[-1, 1]` space, `(-1, -1)` being the top-left pixel center.
    pub fn affine_grid(&mut self, theta: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.data(theta);
        if t.len() != 6 || out_h == 0 || out_w == 0 {
            return Err(Error::Shape {
                op: "affine_grid",
                lhs: self.shape(theta).to_vec(),
                rhs: vec![out_h, out_w],
            });
        }
        let mut data = Vec::with_capacity(out_h * out_w * 2);
        for i in 0..out_h {
            let yt = kernels::pixel_to_normalized(i as f64, out_h);
            for j in 0..out_w {
                let xt = kernels::pixel_to_normalized(j as f64, out_w);
                data.push(t[0] * xt + t[1] * yt + t[2]);
                data.push(t[3] * xt + t[4] * yt + t[5]);
            }
        }
        let out = self.make(vec![out_h, out_w, 2], data);
        let tracked = self.tracked(&[theta]);
        Ok(self.push(
            out,
            Op::AffineGrid {
                theta,
                out_h,
                out_w,
            },
            tracked,
        ))
    }

    /// Bilinear sampling of an `[H, W]` image at the grid positions; taps
    /// falling outside the image read `background`.
    pub fn bilinear_sample(&mut self, image: Var, grid: Var, background: f64) -> Result<Var> {
        let (si, sg) = (self.shape(image).to_vec(), self.shape(grid).to_vec());
        if si.len() != 2 || sg.len() != 3 || sg[2] != 2 {
            return Err(Error::Shape {
                op: "bilinear_sample",
                lhs: si,
                rhs: sg,
            });
        }
        let (h, w) = (si[0], si[1]);
        let img = self.data(image);
        let data = self
            .data(grid)
            .chunks(2)
            .map(|p| {
                let px = kernels::normalized_to_pixel(p[0], w);
                let py = kernels::normalized_to_pixel(p[1], h);
                bilinear_at(img, h, w, px, py, background).0
            })
            .collect();
        let out = self.make(vec![sg[0], sg[1]], data);
        let tracked = self.tracked(&[image, grid]);
        Ok(self.push(
            out,
            Op::BilinearSample {
                image,
                grid,
                background,
            },
            tracked,
        ))
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate (`+=`)
    /// into every tracked leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        if !self.nodes[root.0].tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    self.nodes[i].tensor.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].tensor.data();
        let out = nodes[i].tensor.data();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].tensor.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let bc = broadcast("grad", nodes[a.0].tensor.shape(), nodes[b.0].tensor.shape())
                    .expect("validated in forward");
                let (da, db) = (val(*a), val(*b));
                let op = &nodes[i].op;
                send(*a, &mut |s| {
                    for (k, &gk) in g.iter().enumerate() {
                        let ia = at(&bc.a_idx, k);
                        s[ia] += match op {
                            Op::Mul(..) => gk * db[at(&bc.b_idx, k)],
                            _ => gk,
                        };
                    }
                });
                send(*b, &mut |s| {
                    for (k, &gk) in g.iter().enumerate() {
                        let ib = at(&bc.b_idx, k);
                        s[ib] += match op {
                            Op::Mul(..) => gk * da[at(&bc.a_idx, k)],
                            Op::Sub(..) => -gk,
                            _ => gk,
                        };
                    }
                });
            }
            Op::Scale(x, c) => send(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c);
            }),
            Op::Offset(x) | Op::Reshape(x) => send(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }),
            Op::Matmul { a, b, m, k, n } => {
                let (da, db) = (val(*a), val(*b));
                send(*a, &mut |s| kernels::gemm_nt_acc(g, db, s, *m, *n, *k));
                send(*b, &mut |s| kernels::gemm_tn_acc(da, g, s, *m, *k, *n));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let o = nodes[weight.0].tensor.shape()[0];
                let (rows, p) = (geom.rows(), geom.cols());
                let w = val(*weight);
                if let Some(b) = bias {
                    send(*b, &mut |s| {
                        for (oc, sv) in s.iter_mut().enumerate() {
                            *sv += g[oc * p..(oc + 1) * p].iter().sum::<f64>();
                        }
                    });
                }
                send(*weight, &mut |s| {
                    kernels::gemm_nt_acc(g, cols, s, o, p, rows)
                });
                send(*input, &mut |s| {
                    let mut dcols = vec![0.0; rows * p];
                    kernels::gemm_tn_acc(w, g, &mut dcols, o, rows, p);
                    kernels::col2im_acc(&dcols, geom, s);
                });
            }
            Op::MaxPool2d { input, argmax } => send(*input, &mut |s| {
                for (&j, &gk) in argmax.iter().zip(g) {
                    s[j] += gk;
                }
            }),
            Op::Relu(x) => {
                let xv = val(*x);
                send(*x, &mut |s| {
                    for k in 0..s.len() {
                        if xv[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::Sigmoid(x) => send(*x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Tanh(x) => send(*x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Exp(x) => send(*x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Log(x) => {
                let xv = val(*x);
                send(*x, &mut |s| {
                    for k in 0..s.len() {
                        if xv[k] > POLE_EPS {
                            s[k] += g[k] / xv[k];
                        }
                    }
                })
            }
            Op::Sin(x) => {
                let xv = val(*x);
                send(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * xv[k].cos();
                    }
                })
            }
            Op::Cos(x) => {
                let xv = val(*x);
                send(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * xv[k].sin();
                    }
                })
            }
            Op::Atan2(y, x) => {
                let bc = broadcast("grad", nodes[y.0].tensor.shape(), nodes[x.0].tensor.shape())
                    .expect("validated in forward");
                let (dy, dx) = (val(*y), val(*x));
                let partial = |k: usize| -> (f64, f64) {
                    let (yv, xv) = (dy[at(&bc.a_idx, k)], dx[at(&bc.b_idx, k)]);
                    if at_pole(yv, xv) {
                        (0.0, 0.0)
                    } else {
                        let r2 = xv * xv + yv * yv;
                        (xv / r2, -yv / r2)
                    }
                };
                send(*y, &mut |s| {
                    for (k, &gk) in g.iter().enumerate() {
                        s[at(&bc.a_idx, k)] += gk * partial(k).0;
                    }
                });
                send(*x, &mut |s| {
                    for (k, &gk) in g.iter().enumerate() {
                        s[at(&bc.b_idx, k)] += gk * partial(k).1;
                    }
                });
            }
            Op::Sum(x) => send(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => send(*x, &mut |s| {
                let n = s.len() as f64;
                s.iter_mut().for_each(|v| *v += g[0] / n)
            }),
            Op::L2Norm(x) => {
                let xv = val(*x);
                let norm = out[0];
                send(*x, &mut |s| {
                    if norm > 0.0 {
                        for k in 0..s.len() {
                            s[k] += g[0] * xv[k] / norm;
                        }
                    }
                })
            }
            Op::Softmax { input, cols } => send(*input, &mut |s| {
                for ((srow, orow), grow) in s
                    .chunks_mut(*cols)
                    .zip(out.chunks(*cols))
                    .zip(g.chunks(*cols))
                {
                    let dot: f64 = orow.iter().zip(grow).map(|(o, g)| o * g).sum();
                    for k in 0..srow.len() {
                        srow[k] += orow[k] * (grow[k] - dot);
                    }
                }
            }),
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let n = z.len() as f64;
                send(*logits, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (sigmoid(z[k]) - targets[k]) / n;
                    }
                })
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].tensor.numel();
                    send(p, &mut |s| {
                        s.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(s, g)| *s += g);
                    });
                    offset += len;
                }
            }
            Op::Index(x, j) => send(*x, &mut |s| s[*j] += g[0]),
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    send(p, &mut |s| s[0] += g[k]);
                }
            }
            Op::GlobalAvgPool(x) => {
                let sh = nodes[x.0].tensor.shape();
                let hw = sh[1] * sh[2];
                send(*x, &mut |s| {
                    for (c, chunk) in s.chunks_mut(hw).enumerate() {
                        let gc = g[c] / hw as f64;
                        chunk.iter_mut().for_each(|v| *v += gc);
                    }
                })
            }
            Op::AffineGrid {
                theta,
                out_h,
                out_w,
            } => send(*theta, &mut |s| {
                for i in 0..*out_h {
                    let yt = kernels::pixel_to_normalized(i as f64, *out_h);
                    for j in 0..*out_w {
                        let xt = kernels::pixel_to_normalized(j as f64, *out_w);
                        let k = (i * out_w + j) * 2;
                        let (gx, gy) = (g[k], g[k + 1]);
                        s[0] += gx * xt;
                        s[1] += gx * yt;
                        s[2] += gx;
                        s[3] += gy * xt;
                        s[4] += gy * yt;
                        s[5] += gy;
                    }
                }
            }),
            Op::BilinearSample {
                image,
                grid,
                background,
            } => {
                let sh = nodes[image.0].tensor.shape();
                let (h, w) = (sh[0], sh[1]);
                let img = val(*image);
                let gr = val(*grid);
                send(*image, &mut |s| {
                    for (k, &gk) in g.iter().enumerate() {
                        let px = kernels::normalized_to_pixel(gr[2 * k], w);
                        let py = kernels::normalized_to_pixel(gr[2 * k + 1], h);
                        let (x0, y0) = (px.floor(), py.floor());
                        let (fx, fy) = (px - x0, py - y0);
                        let (x0, y0) = (x0 as i64, y0 as i64);
                        for (dx, dy, wt) in [
                            (0, 0, (1.0 - fx) * (1.0 - fy)),
                            (1, 0, fx * (1.0 - fy)),
                            (0, 1, (1.0 - fx) * fy),
                            (1, 1, fx * fy),
                        ] {
                            let (x, y) = (x0 + dx, y0 + dy);
                            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                                s[y as usize * w + x as usize] += gk * wt;
                            }
                        }
                    }
                });
                let sx = if w > 1 { 0.5 * (w - 1) as f64 } else { 0.0 };
                let sy = if h > 1 { 0.5 * (h - 1) as f64 } else { 0.0 };
                send(*grid, &mut |s| {
                    for (k, &gk) in g.iter().enumerate() {
                        let px = kernels::normalized_to_pixel(gr[2 * k], w);
                        let py = kernels::normalized_to_pixel(gr[2 * k + 1], h);
                        let (_, dpx, dpy) = bilinear_at(img, h, w, px, py, *background);
                        s[2 * k] += gk * dpx * sx;
                        s[2 * k + 1] += gk * dpy * sy;
                    }
                });
            }
        }
    }
}

#[inline]
fn at_pole(y: f64, x: f64) -> bool {
    y.abs() < POLE_EPS && x.abs() < POLE_EPS
}
