//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough context to propagate gradients. [`Graph::backward`] walks the tape
//! once in reverse. Nodes that do not depend on any gradient-requiring leaf
//! are skipped.

use crate::error::{Error, Result};
use crate::frames::Mask;
use crate::geometry::{self, CameraIntrinsics, Pose6DoF, RotationOrder};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Tensor),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Abs(Var),
    Recip(Var),
    Square(Var),
    MulScalarVar(Var, Var),
    MulChannel(Var, Var),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    UpNearest(Var),
    UpBilinear(Var),
    AvgPool3(Var),
    DiffX(Var),
    DiffY(Var),
    GridSample(Var, Var),
    Reproject {
        depth: Var,
        pose: Var,
        k: CameraIntrinsics,
        order: RotationOrder,
    },
    InvertPose(Var, [[f64; 6]; 6]),
    Correlation(Var, Var, usize),
    SumAll(Var),
    MeanAll(Var),
    MeanChannels(Var),
    MeanSpatial(Var),
    Reshape(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    SoftmaxRows(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`]. Only leaves
/// keep their gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// A leaf whose gradient will be tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y })?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Minimum(a, b), ng))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let v = self.value(x).map(|e| scale * e + offset);
        let ng = self.ng(x);
        self.push(v, Op::Affine(x, scale), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let v = self.value(x).zip_map(&c, |a, b| a * b)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::MulConst(x, c), ng))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::invalid("mul_scalar_var expects a one-element scale"));
        }
        let sv = self.scalar(s);
        let v = self.value(x).map(|e| e * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(v, Op::MulScalarVar(x, s), ng))
    }

    /// Broadcast `[C, H, W] * [C]`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        if self.shape(w) != [c] {
            return Err(shape_err("mul_channel", self.shape(x), self.shape(w)));
        }
        let plane = h * wd;
        let wv = self.value(w).data().to_vec();
        let mut v = self.value(x).clone();
        for (ci, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            for e in chunk {
                *e *= wv[ci];
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(v, Op::MulChannel(x, w), ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&vals)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_channels(start, len)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::SliceChannels(x, start), ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(shape_err("conv2d", self.shape(x), &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeometry::new(c_in, h, wd, ws[2], stride, pad)
            .ok_or_else(|| Error::invalid(format!("conv2d: kernel {} too large for ({h}, {wd})", ws[2])))?;
        let (out, cols) = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        // the unfolded input is only needed for weight gradients
        let keep_cols = if self.ng(w) { cols } else { None };
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep_cols,
            },
            ng,
        ))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims3()?;
        let v = kernels::upsample_nearest2_forward(self.value(x));
        let ng = self.ng(x);
        Ok(self.push(v, Op::UpNearest(x), ng))
    }

    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims3()?;
        let v = kernels::upsample_bilinear2_forward(self.value(x));
        let ng = self.ng(x);
        Ok(self.push(v, Op::UpBilinear(x), ng))
    }

    /// 3×3 mean filter with reflection padding.
    pub fn avg_pool3(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        if h < 2 || w < 2 {
            return Err(Error::invalid("avg_pool3 needs at least 2×2 inputs"));
        }
        let v = kernels::avg_pool3_forward(self.value(x));
        let ng = self.ng(x);
        Ok(self.push(v, Op::AvgPool3(x), ng))
    }

    /// Forward difference along x: `[C, H, W-1]`.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x);
        let v = Tensor::from_fn3(c, h, w - 1, |ci, y, xx| src.at3(ci, y, xx + 1) - src.at3(ci, y, xx));
        let ng = self.ng(x);
        Ok(self.push(v, Op::DiffX(x), ng))
    }

    /// Forward difference along y: `[C, H-1, W]`.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x);
        let v = Tensor::from_fn3(c, h - 1, w, |ci, y, xx| src.at3(ci, y + 1, xx) - src.at3(ci, y, xx));
        let ng = self.ng(x);
        Ok(self.push(v, Op::DiffY(x), ng))
    }

    /// Bilinear sampling of `image` at `coords [2, H', W']`.
    pub fn grid_sample(&mut self, image: Var, coords: Var) -> Result<(Var, Mask)> {
        self.value(image).dims3()?;
        let (cc, ho, wo) = self.value(coords).dims3()?;
        if cc != 2 {
            return Err(Error::invalid(format!("grid_sample: coords need 2 channels, got {cc}")));
        }
        let (out, valid) = kernels::grid_sample_forward(self.value(image), self.value(coords));
        let ng = self.ng(image) || self.ng(coords);
        Ok((self.push(out, Op::GridSample(image, coords), ng), Mask::new(ho, wo, valid)))
    }

    /// Source-view coordinates of every target pixel given target depth
    /// `[1, H, W]` and a 6-DoF pose `[6]` (target frame → source frame).
    pub fn reproject(
        &mut self,
        depth: Var,
        pose: Var,
        k: CameraIntrinsics,
        order: RotationOrder,
    ) -> Result<Var> {
        let (c, _, _) = self.value(depth).dims3()?;
        if c != 1 || self.shape(pose) != [6] {
            return Err(shape_err("reproject", self.shape(depth), self.shape(pose)));
        }
        let v = geometry::reproject_from_pose(self.value(depth), self.value(pose).data(), &k, order);
        let ng = self.ng(depth) || self.ng(pose);
        Ok(self.push(v, Op::Reproject { depth, pose, k, order }, ng))
    }

    /// The 6-vector of the inverse rigid transform of a pose.
    pub fn invert_pose(&mut self, pose: Var, order: RotationOrder) -> Result<Var> {
        let p = Pose6DoF::from_slice(self.value(pose).data())?;
        let (inv, jac) = geometry::invert_pose_with_jacobian(&p, order);
        let v = Tensor::from_vec(&[6], inv.to_array().to_vec())?;
        let ng = self.ng(pose);
        Ok(self.push(v, Op::InvertPose(pose, jac), ng))
    }

    pub fn correlation(&mut self, a: Var, b: Var, radius: usize) -> Result<Var> {
        self.value(a).dims3()?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("correlation", self.shape(a), self.shape(b)));
        }
        let v = kernels::correlation_forward(self.value(a), self.value(b), radius);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Correlation(a, b, radius), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// `[C, H, W] -> [1, H, W]`.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x);
        let v = Tensor::from_fn3(1, h, w, |_, y, xx| (0..c).map(|ci| src.at3(ci, y, xx)).sum::<f64>() / c as f64);
        let ng = self.ng(x);
        Ok(self.push(v, Op::MeanChannels(x), ng))
    }

    /// `[C, H, W] -> [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let v = Tensor::from_vec(
            &[c],
            self.value(x)
                .data()
                .chunks(plane)
                .map(|ch| ch.iter().sum::<f64>() / plane as f64)
                .collect(),
        )?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::MeanSpatial(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    fn mat_dims(&self, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::invalid(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a [m, k] · b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a)?;
        let (k2, n) = self.mat_dims(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let v = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[m, n], v)?, Op::MatMul(a, b), ng))
    }

    /// `a [m, k] · bᵀ` with `b [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a)?;
        let (n, k2) = self.mat_dims(b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let v = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[m, n], v)?, Op::MatMulNT(a, b), ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.mat_dims(x)?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::SoftmaxRows(x), ng))
    }

    /// Fully connected layer `w [out, in] · x + b` on a flattened input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n_in = self.value(x).len();
        let (n_out, k) = self.mat_dims(w)?;
        if k != n_in || self.shape(b) != [n_out] {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        let mut y = kernels::matmul(self.value(w).data(), self.value(x).data(), n_out, n_in, 1);
        for (yi, bi) in y.iter_mut().zip(self.value(b).data()) {
            *yi += bi;
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[n_out], y)?, Op::Linear { x, w, b }, ng))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |g, y| g * y).unwrap());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |g, x| g * x).unwrap());
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(vb, |g, y| g / y).unwrap());
                }
                if self.ng(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = out.zip_map(vb, |q, y| -q / y).unwrap();
                    self.acc(grads, *b, g.zip_map(&t, |g, t| g * t).unwrap());
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = va.data().iter().zip(vb.data()).map(|(x, y)| x <= y).collect();
                if self.ng(*a) {
                    let mut t = g.clone();
                    for (e, &pa) in t.data_mut().iter_mut().zip(&pick_a) {
                        if !pa {
                            *e = 0.0;
                        }
                    }
                    self.acc(grads, *a, t);
                }
                if self.ng(*b) {
                    let mut t = g.clone();
                    for (e, &pa) in t.data_mut().iter_mut().zip(&pick_a) {
                        if pa {
                            *e = 0.0;
                        }
                    }
                    self.acc(grads, *b, t);
                }
            }
            Op::Affine(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::MulConst(x, c) => self.acc(grads, *x, g.zip_map(c, |g, c| g * c).unwrap()),
            Op::Sigmoid(x) => self.acc(grads, *x, g.zip_map(out, |g, y| g * y * (1.0 - y)).unwrap()),
            Op::Tanh(x) => self.acc(grads, *x, g.zip_map(out, |g, y| g * (1.0 - y * y)).unwrap()),
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                self.acc(
                    grads,
                    *x,
                    g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { g * s }).unwrap(),
                )
            }
            Op::Exp(x) => self.acc(grads, *x, g.zip_map(out, |g, y| g * y).unwrap()),
            Op::Abs(x) => self.acc(
                grads,
                *x,
                g.zip_map(self.value(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .unwrap(),
            ),
            Op::Recip(x) => self.acc(grads, *x, g.zip_map(out, |g, y| -g * y * y).unwrap()),
            Op::Square(x) => self.acc(grads, *x, g.zip_map(self.value(*x), |g, v| 2.0 * g * v).unwrap()),
            Op::MulScalarVar(x, s) => {
                if self.ng(*x) {
                    let sv = self.scalar(*s);
                    self.acc(grads, *x, g.map(|v| v * sv));
                }
                if self.ng(*s) {
                    let d: f64 = g.data().iter().zip(self.value(*x).data()).map(|(g, v)| g * v).sum();
                    self.acc(grads, *s, Tensor::from_vec(self.shape(*s), vec![d]).unwrap());
                }
            }
            Op::MulChannel(x, w) => {
                let (c, h, wd) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let plane = h * wd;
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let mut t = g.clone();
                    for (ci, ch) in t.data_mut().chunks_mut(plane).enumerate() {
                        for e in ch {
                            *e *= wv[ci];
                        }
                    }
                    self.acc(grads, *x, t);
                }
                if self.ng(*w) {
                    let xv = self.value(*x).data();
                    let d: Vec<f64> = (0..c)
                        .map(|ci| {
                            let r = ci * plane..(ci + 1) * plane;
                            g.data()[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    self.acc(grads, *w, Tensor::from_vec(&[c], d).unwrap());
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[0];
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_channels(start, c).unwrap());
                    }
                    start += c;
                }
            }
            Op::SliceChannels(x, start) => {
                if self.ng(*x) {
                    let xs = self.shape(*x);
                    let plane = xs[1] * xs[2];
                    let mut t = Tensor::zeros(xs);
                    t.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                    self.acc(grads, *x, t);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let need_x = self.ng(*x);
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    cols.as_deref(),
                    self.value(*w),
                    g,
                    geom,
                    need_x,
                    self.ng(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::UpNearest(x) => self.acc(grads, *x, kernels::upsample_nearest2_backward(g)),
            Op::UpBilinear(x) => self.acc(grads, *x, kernels::upsample_bilinear2_backward(g)),
            Op::AvgPool3(x) => self.acc(grads, *x, kernels::avg_pool3_backward(g)),
            Op::DiffX(x) => {
                let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut t = Tensor::zeros(self.shape(*x));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let v = g.at3(ci, y, xx);
                            t.set3(ci, y, xx + 1, t.at3(ci, y, xx + 1) + v);
                            t.set3(ci, y, xx, t.at3(ci, y, xx) - v);
                        }
                    }
                }
                self.acc(grads, *x, t);
            }
            Op::DiffY(x) => {
                let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut t = Tensor::zeros(self.shape(*x));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let v = g.at3(ci, y, xx);
                            t.set3(ci, y + 1, xx, t.at3(ci, y + 1, xx) + v);
                            t.set3(ci, y, xx, t.at3(ci, y, xx) - v);
                        }
                    }
                }
                self.acc(grads, *x, t);
            }
            Op::GridSample(img, coords) => {
                let (gi, gc) = kernels::grid_sample_backward(
                    self.value(*img),
                    self.value(*coords),
                    g,
                    self.ng(*img),
                    self.ng(*coords),
                );
                if let Some(gi) = gi {
                    self.acc(grads, *img, gi);
                }
                if let Some(gc) = gc {
                    self.acc(grads, *coords, gc);
                }
            }
            Op::Reproject { depth, pose, k, order } => {
                let (gd, gp) = geometry::reproject_from_pose_backward(
                    self.value(*depth),
                    self.value(*pose).data(),
                    k,
                    *order,
                    g,
                );
                self.acc(grads, *depth, gd);
                self.acc(grads, *pose, Tensor::from_vec(&[6], gp.to_vec()).unwrap());
            }
            Op::InvertPose(p, jac) => {
                let gv = g.data();
                let d: Vec<f64> = (0..6).map(|j| (0..6).map(|i| gv[i] * jac[i][j]).sum()).collect();
                self.acc(grads, *p, Tensor::from_vec(&[6], d).unwrap());
            }
            Op::Correlation(a, b, r) => {
                let (ga, gb) = kernels::correlation_backward(self.value(*a), self.value(*b), *r, g);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let gv = g.item() / n;
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MeanChannels(x) => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                self.acc(grads, *x, Tensor::from_fn3(c, h, w, |_, y, xx| g.at3(0, y, xx) / c as f64));
            }
            Op::MeanSpatial(x) => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let n = (h * w) as f64;
                self.acc(grads, *x, Tensor::from_fn3(c, h, w, |ci, _, _| g.data()[ci] / n));
            }
            Op::Reshape(x) => self.acc(grads, *x, g.clone().reshape(self.shape(*x)).unwrap()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let d = kernels::matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, Tensor::from_vec(&[m, k], d).unwrap());
                }
                if self.ng(*b) {
                    let d = kernels::matmul_tn(self.value(*a).data(), g.data(), k, m, n);
                    self.acc(grads, *b, Tensor::from_vec(&[k, n], d).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.ng(*a) {
                    let d = kernels::matmul(g.data(), self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, Tensor::from_vec(&[m, k], d).unwrap());
                }
                if self.ng(*b) {
                    let d = kernels::matmul_tn(g.data(), self.value(*a).data(), n, m, k);
                    self.acc(grads, *b, Tensor::from_vec(&[n, k], d).unwrap());
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.shape()[1];
                let mut t = g.clone();
                for (gr, yr) in t.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (e, y) in gr.iter_mut().zip(yr) {
                        *e = y * (*e - dot);
                    }
                }
                self.acc(grads, *x, t);
            }
            Op::Linear { x, w, b } => {
                let (n_out, n_in) = (self.shape(*w)[0], self.shape(*w)[1]);
                if self.ng(*x) {
                    let d = kernels::matmul_tn(self.value(*w).data(), g.data(), n_in, n_out, 1);
                    self.acc(grads, *x, Tensor::from_vec(self.shape(*x), d).unwrap());
                }
                if self.ng(*w) {
                    let d = kernels::matmul(g.data(), self.value(*x).data(), n_out, 1, n_in);
                    self.acc(grads, *w, Tensor::from_vec(&[n_out, n_in], d).unwrap());
                }
                self.acc(grads, *b, g.clone());
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};

    fn smooth(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.61 + seed).sin() * 0.8).collect()).unwrap()
    }

    fn assert_ok(r: GradCheck) {
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn elementwise_chain_gradients() {
        let x0 = smooth(&[2, 3, 4], 0.3);
        let y0 = smooth(&[2, 3, 4], 1.7).map(|v| v + 2.0);
        assert_ok(check_gradient(&x0, 1e-6, |g, x| {
            let y = g.constant(y0.clone());
            let a = g.sigmoid(x);
            let b = g.tanh(x);
            let c = g.mul(a, b)?;
            let d = g.div(c, y)?;
            let e = g.exp(d);
            let f = g.square(e);
            let h = g.leaky_relu(f, 0.1);
            let m = g.minimum(h, y)?;
            let r = g.recip(y);
            let s = g.mul(m, r)?;
            Ok(g.sum_all(s))
        }));
    }

    #[test]
    fn conv_and_resampling_gradients() {
        let x0 = smooth(&[3, 6, 8], 0.9);
        let w0 = smooth(&[4, 3, 3, 3], 2.1);
        assert_ok(check_gradient(&x0, 1e-6, |g, x| {
            let w = g.constant(w0.clone());
            let y = g.conv2d(x, w, None, 2, 1)?;
            let u = g.upsample_bilinear2(y)?;
            let n = g.upsample_nearest2(y)?;
            let s = g.add(u, n)?;
            let p = g.avg_pool3(s)?;
            let q = g.square(p);
            Ok(g.mean_all(q))
        }));
        assert_ok(check_gradient(&w0, 1e-6, |g, w| {
            let x = g.constant(x0.clone());
            let y = g.conv2d(x, w, None, 1, 1)?;
            let q = g.square(y);
            Ok(g.mean_all(q))
        }));
    }

    #[test]
    fn attention_style_gradients() {
        let x0 = smooth(&[4, 6], 0.2);
        let w0 = smooth(&[3, 24], 0.5);
        assert_ok(check_gradient(&x0, 1e-6, |g, x| {
            let a = g.matmul_nt(x, x)?;
            let a = g.scale(a, 0.5);
            let s = g.softmax_rows(a)?;
            let v = g.matmul(s, x)?;
            let f = g.reshape(v, &[24])?;
            let w = g.constant(w0.clone());
            let b = g.constant(Tensor::zeros(&[3]));
            let o = g.linear(f, w, b)?;
            let o = g.square(o);
            Ok(g.sum_all(o))
        }));
    }

    #[test]
    fn correlation_and_channel_ops_gradients() {
        let x0 = smooth(&[3, 5, 6], 0.4);
        let y0 = smooth(&[3, 5, 6], 3.3);
        assert_ok(check_gradient(&x0, 1e-6, |g, x| {
            let y = g.constant(y0.clone());
            let c = g.correlation(x, y, 2)?;
            let c2 = g.correlation(y, x, 1)?;
            let m = g.mean_spatial(x)?;
            let m = g.sigmoid(m);
            let xm = g.mul_channel(x, m)?;
            let cat = g.concat(&[c, c2, xm])?;
            let s = g.slice_channels(cat, 3, 30)?;
            let mc = g.mean_channels(s)?;
            let dx = g.diff_x(mc)?;
            let dy = g.diff_y(mc)?;
            let ax = g.abs(dx);
            let ay = g.abs(dy);
            let a = g.mean_all(ax);
            let b = g.mean_all(ay);
            let t = g.add(a, b)?;
            let t2 = g.mul_scalar_var(t, a)?;
            Ok(g.add(t2, b)?)
        }));
    }
}
