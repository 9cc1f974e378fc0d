use super::kernels::{self, ConvDims, ConvGeom, UpsampleMode, XcorrDims};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise single-input functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    /// `ln(1 + e^x)`
    Softplus,
    /// `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
    SmoothL1,
}

impl Unary {
    fn apply<T: Real>(self, x: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            Unary::Relu => x.max(zero),
            Unary::Sigmoid => stable_sigmoid(x),
            Unary::Softplus => x.max(zero) + (-x.abs()).exp().ln_1p(),
            Unary::SmoothL1 => {
                let a = x.abs();
                if a < one {
                    T::of_f64(0.5) * x * x
                } else {
                    a - T::of_f64(0.5)
                }
            }
        }
    }

    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Softplus => stable_sigmoid(x),
            Unary::SmoothL1 => {
                if x.abs() < one {
                    x
                } else {
                    x.signum()
                }
            }
        }
    }
}

/// Logistic function evaluated without overflowing `exp`.
pub(crate) fn stable_sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Xcorr {
        s: Var,
        z: Var,
        dims: XcorrDims,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: T,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Upsample {
        x: Var,
        mode: UpsampleMode,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    CropPad {
        x: Var,
        y0: isize,
        x0: isize,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so the vector is always in
/// topological order and a single reverse sweep visits each node once.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; it is differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.push(t.shape().to_vec(), value, t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf directly in the tape's scalar type.
    pub fn leaf_values(&mut self, shape: &[usize], value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != value.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} does not hold {} values", value.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), value, requires_grad, Op::Leaf))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, shape: &[usize], value: &[f32]) -> Result<Var> {
        self.leaf_values(shape, value.iter().map(|&v| T::of_f32(v)).collect(), false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// The single value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "item() on non-scalar of shape {:?}", n.shape);
        n.value[0]
    }

    /// Copies a node out as an `f32` tensor (without gradient).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.iter().map(|x| x.as_f32()).collect())
            .expect("tape nodes always have consistent shapes")
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Branch taken by every non-smooth elementwise op on the tape.
    ///
    /// Two evaluations with equal patterns lie on the same smooth piece, which
    /// is what makes a finite difference between them meaningful.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for n in &self.nodes {
            if let Op::Unary { x, f } = n.op {
                let xs = self.value(x);
                match f {
                    Unary::Relu => bits.extend(xs.iter().map(|&v| v > T::zero())),
                    Unary::SmoothL1 => bits.extend(xs.iter().map(|&v| v.abs() < T::one())),
                    Unary::Sigmoid | Unary::Softplus => {}
                }
            }
        }
        bits
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (ho, wo) = match (
            kernels::conv_out_len(xs[1], ks[2], geom),
            kernels::conv_out_len(xs[2], ks[3], geom),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d (kernel does not fit padded input)",
                    lhs: xs,
                    rhs: ks,
                })
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ks,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let dims = ConvDims {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            ho,
            wo,
            geom,
        };
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            &dims,
        );
        let rg = self.rg(x) || self.rg(k) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![ks[0], ho, wo], out, rg, Op::Conv2d { x, k, bias, dims }))
    }

    /// Per-channel valid cross-correlation of `search` with `exemplar`.
    pub fn depthwise_xcorr(&mut self, search: Var, exemplar: Var) -> Result<Var> {
        let (ss, zs) = (self.shape(search).to_vec(), self.shape(exemplar).to_vec());
        if ss.len() != 3 || zs.len() != 3 || ss[0] != zs[0] || zs[1] > ss[1] || zs[2] > ss[2] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_xcorr",
                lhs: ss,
                rhs: zs,
            });
        }
        let dims = XcorrDims {
            c: ss[0],
            hs: ss[1],
            ws: ss[2],
            hz: zs[1],
            wz: zs[2],
        };
        let out = kernels::xcorr_forward(self.value(search), self.value(exemplar), &dims);
        let rg = self.rg(search) || self.rg(exemplar);
        Ok(self.push(
            vec![dims.c, dims.ho(), dims.wo()],
            out,
            rg,
            Op::Xcorr {
                s: search,
                z: exemplar,
                dims,
            },
        ))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).iter().map(|&v| f.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, rg, Op::Unary { x, f })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Unary::SmoothL1)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::of_f64(factor);
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, rg, Op::Scale { x, factor })
    }

    /// `y[c, ..] = x[c, ..] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: xs,
                rhs: self.shape(scale).to_vec(),
            });
        }
        let inner = numel(&xs) / c;
        let (sv, tv) = (self.value(scale), self.value(shift));
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / inner] + tv[i / inner])
            .collect();
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(xs, out, rg, Op::ChannelAffine { x, scale, shift }))
    }

    /// Per-channel standardisation over all non-channel positions:
    /// `y = (x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        let inner = numel(&xs) / c;
        if xs.len() < 2 || inner < 2 {
            return Err(Error::shape("instance_norm", format!("need >= 2 positions per channel, got {xs:?}")));
        }
        let n = T::of_f64(inner as f64);
        let mut out = Vec::with_capacity(c * inner);
        let mut inv_std = Vec::with_capacity(c);
        for ch in self.value(x).chunks(inner) {
            let mean = ch.iter().copied().sum::<T>() / n;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of_f64(eps)).sqrt();
            out.extend(ch.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push(xs, out, rg, Op::InstanceNorm { x, inv_std }))
    }

    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("upsample2x", format!("expected [C,H,W], got {xs:?}")));
        }
        let out = kernels::upsample_forward(self.value(x), xs[0], xs[1], xs[2], mode);
        let rg = self.rg(x);
        Ok(self.push(vec![xs[0], 2 * xs[1], 2 * xs[2]], out, rg, Op::Upsample { x, mode }))
    }

    /// Flat gather: `y[i] = x.flat[index[i]]`, shape `[index.len()]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if index.is_empty() {
            return Err(Error::shape("gather", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {n} values")));
        }
        let src = self.value(x);
        let out = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![index.len()], out, rg, Op::Gather { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of a `[C,H,W]` node; outside is zero.
    pub fn crop_pad(&mut self, x: Var, y0: isize, x0: isize, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || h == 0 || w == 0 {
            return Err(Error::shape("crop_pad", format!("cannot crop {h}x{w} from {xs:?}")));
        }
        let (c, ih, iw) = (xs[0], xs[1] as isize, xs[2] as isize);
        let src = self.value(x);
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for r in 0..h {
                let sy = y0 + r as isize;
                if sy < 0 || sy >= ih {
                    continue;
                }
                for col in 0..w {
                    let sx = x0 + col as isize;
                    if sx < 0 || sx >= iw {
                        continue;
                    }
                    out[(ch * h + r) * w + col] = src[((ch as isize * ih + sy) * iw + sx) as usize];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, h, w], out, rg, Op::CropPad { x, y0, x0 }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaf gradients are added to whatever earlier calls left behind; call
    /// [`Tape::zero_grads`] to clear them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => node.grad = Some(g),
                    }
                }
                Op::Conv2d { x, k, bias, dims } => {
                    let mut dx = self.rg(x).then(|| vec![T::zero(); self.value(x).len()]);
                    let mut dk = self.rg(k).then(|| vec![T::zero(); self.value(k).len()]);
                    let mut db = bias.filter(|&b| self.rg(b)).map(|_| vec![T::zero(); dims.cout]);
                    kernels::conv2d_backward(
                        self.value(x),
                        self.value(k),
                        &g,
                        &dims,
                        dx.as_deref_mut(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, k, dk);
                    if let Some(b) = bias {
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Xcorr { s, z, dims } => {
                    let mut ds = self.rg(s).then(|| vec![T::zero(); self.value(s).len()]);
                    let mut dz = self.rg(z).then(|| vec![T::zero(); self.value(z).len()]);
                    kernels::xcorr_backward(
                        self.value(s),
                        self.value(z),
                        &g,
                        &dims,
                        ds.as_deref_mut(),
                        dz.as_deref_mut(),
                    );
                    accumulate(&mut grads, s, ds);
                    accumulate(&mut grads, z, dz);
                }
                Op::Unary { x, f } => {
                    let (xv, yv) = (self.value(x), &self.nodes[i].value);
                    let dx = g
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(&gi, (&xi, &yi))| gi * f.derivative(xi, yi))
                        .collect();
                    accumulate(&mut grads, x, Some(dx));
                }
                Op::Add(a, b) => {
                    let ga = self.rg(a).then(|| g.clone());
                    accumulate(&mut grads, a, ga);
                    let gb = self.rg(b).then_some(g);
                    accumulate(&mut grads, b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = self.rg(a).then(|| g.clone());
                    accumulate(&mut grads, a, ga);
                    let gb = self.rg(b).then(|| g.iter().map(|&v| -v).collect());
                    accumulate(&mut grads, b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = self
                        .rg(a)
                        .then(|| g.iter().zip(self.value(b)).map(|(&gi, &bi)| gi * bi).collect());
                    let gb = self
                        .rg(b)
                        .then(|| g.iter().zip(self.value(a)).map(|(&gi, &ai)| gi * ai).collect());
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, x, Some(g.iter().map(|&v| v * factor).collect()));
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let c = self.shape(scale)[0];
                    let inner = g.len() / c;
                    let sv = self.value(scale);
                    let xv = self.value(x);
                    let dx = self
                        .rg(x)
                        .then(|| g.iter().enumerate().map(|(j, &gj)| gj * sv[j / inner]).collect());
                    let dscale = self.rg(scale).then(|| {
                        (0..c)
                            .map(|ch| {
                                (ch * inner..(ch + 1) * inner)
                                    .map(|j| g[j] * xv[j])
                                    .sum::<T>()
                            })
                            .collect()
                    });
                    let dshift = self
                        .rg(shift)
                        .then(|| g.chunks(inner).map(|ch| ch.iter().copied().sum::<T>()).collect());
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, scale, dscale);
                    accumulate(&mut grads, shift, dshift);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let c = inv_std.len();
                    let inner = g.len() / c;
                    let n = T::of_f64(inner as f64);
                    let y = &self.nodes[i].value;
                    let mut dx = Vec::with_capacity(g.len());
                    for ch in 0..c {
                        let (gs, ys) = (&g[ch * inner..(ch + 1) * inner], &y[ch * inner..(ch + 1) * inner]);
                        let gm = gs.iter().copied().sum::<T>() / n;
                        let gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
                        dx.extend(gs.iter().zip(ys).map(|(&a, &b)| inv_std[ch] * (a - gm - b * gy)));
                    }
                    accumulate(&mut grads, x, Some(dx));
                }
                Op::Upsample { x, mode } => {
                    let xs = self.shape(x);
                    let mut dx = vec![T::zero(); self.value(x).len()];
                    kernels::upsample_backward(&g, xs[0], xs[1], xs[2], mode, &mut dx);
                    accumulate(&mut grads, x, Some(dx));
                }
                Op::Gather { x, index } => {
                    let mut dx = vec![T::zero(); self.value(x).len()];
                    for (&ix, &gi) in index.iter().zip(&g) {
                        dx[ix] = dx[ix] + gi;
                    }
                    accumulate(&mut grads, x, Some(dx));
                }
                Op::Reshape(x) => accumulate(&mut grads, x, Some(g)),
                Op::CropPad { x, y0, x0 } => {
                    let xs = self.shape(x).to_vec();
                    let os = &self.nodes[i].shape;
                    let (c, ih, iw) = (xs[0], xs[1] as isize, xs[2] as isize);
                    let (h, w) = (os[1], os[2]);
                    let mut dx = vec![T::zero(); self.value(x).len()];
                    for ch in 0..c {
                        for r in 0..h {
                            let sy = y0 + r as isize;
                            if sy < 0 || sy >= ih {
                                continue;
                            }
                            for col in 0..w {
                                let sx = x0 + col as isize;
                                if sx < 0 || sx >= iw {
                                    continue;
                                }
                                dx[((ch as isize * ih + sy) * iw + sx) as usize] = g[(ch * h + r) * w + col];
                            }
                        }
                    }
                    accumulate(&mut grads, x, Some(dx));
                }
                Op::Sum(x) => {
                    let n = self.value(x).len();
                    accumulate(&mut grads, x, Some(vec![g[0]; n]));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}
