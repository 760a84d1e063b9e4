//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its eagerly computed value, so the
//! node list is always in topological order. `backward` walks the list in
//! reverse and *records the gradient computation as new nodes on the same
//! tape*. Because each primitive's gradient rule is built out of the same
//! primitives, a second backward pass over the extended tape yields exact
//! second-order gradients — this is what lets the meta-update differentiate
//! through an inner adaptation step.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// Elementwise multiply by a one-element tensor on the tape.
    ScaleBy(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Unfold {
        x: Var,
        k: usize,
        stride: usize,
    },
    Fold {
        g: Var,
        k: usize,
        stride: usize,
    },
    SumSpatial(Var),
    BroadcastSpatial(Var),
    SumAll(Var),
    BroadcastTo(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Gradients are tape nodes
/// themselves, so they can participate in further recorded computation.
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Var>>,
}

impl GradMap {
    pub fn var(&self, v: Var) -> Option<Var> {
        self.grads.get(v.0).copied().flatten()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// C[m,n] += A[m,k] * B[k,n], row-major. The i-k-j order keeps the inner
/// loop contiguous so it vectorizes.
fn matmul_accum(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size - k) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient values for `v` from a finished backward pass, if any flowed.
    pub fn grad_value(&self, grads: &GradMap, v: Var) -> Option<&[f32]> {
        grads.var(v).map(|g| self.value(g))
    }

    // ── Node constructors ────────────────────────────────────────────

    /// Record a leaf from a tensor, copying its data. The leaf participates
    /// in gradient computation iff the tensor requires grad.
    pub fn input(&mut self, t: &super::Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Var {
        self.push(Op::Constant, shape, data, false)
    }

    // ── Elementwise and scalar ops ───────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dimension(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Scale(a, c), self.nodes[a.0].shape.clone(), data, ng)
    }

    /// Elementwise multiply by a one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::dimension(
                "scale_by",
                format!("scale factor has shape {:?}", self.nodes[s.0].shape),
            ));
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[a.0].data.iter().map(|x| x * sv).collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[s.0].needs_grad;
        Ok(self.push(Op::ScaleBy(a, s), self.nodes[a.0].shape.clone(), data, ng))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                format!("{:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_accum(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut data,
        );
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Op::Matmul(a, b), vec![m, n], data, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::dimension("transpose", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(Op::Transpose(a), vec![n, m], data, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::dimension(
                "reshape",
                format!("{:?} into {:?}", self.nodes[a.0].shape, shape),
            ));
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(Op::Reshape(a), shape, data, ng))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), data, ng)
    }

    /// Numerically stable softmax over a 1-D vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 1 {
            return Err(Error::dimension("softmax", format!("{:?}", s)));
        }
        let src = &self.nodes[a.0].data;
        let max = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = src.iter().map(|&x| (x - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        let data = exps.iter().map(|e| e / sum).collect();
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(Op::Softmax(a), s.clone(), data, ng))
    }

    /// Negative log-likelihood of `label` under softmax(logits); scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 1 {
            return Err(Error::dimension("cross_entropy", format!("{:?}", s)));
        }
        let k = s[0];
        if label >= k {
            return Err(Error::Label {
                label,
                num_classes: k,
            });
        }
        let src = &self.nodes[logits.0].data;
        let max = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + src.iter().map(|&x| (x - max).exp()).sum::<f32>().ln();
        let loss = lse - src[label];
        let ng = self.nodes[logits.0].needs_grad;
        Ok(self.push(Op::CrossEntropy { logits, label }, vec![1], vec![loss], ng))
    }

    // ── Spatial ops ──────────────────────────────────────────────────

    /// im2col: [C,H,W] -> [C*k*k, oh*ow] with the given stride, valid
    /// windows only.
    pub fn unfold(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(Error::dimension("unfold", format!("{:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h < k || w < k {
            return Err(Error::dimension(
                "unfold",
                format!("input {:?} smaller than {}x{} kernel", s, k, k),
            ));
        }
        let (oh, ow) = (conv_out(h, k, stride), conv_out(w, k, stride));
        let cols = oh * ow;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; c * k * k * cols];
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let row = (ci * k + di) * k + dj;
                    let out_row = &mut data[row * cols..(row + 1) * cols];
                    for oi in 0..oh {
                        let base = (oi * stride + di) * w + dj;
                        for oj in 0..ow {
                            out_row[oi * ow + oj] = plane[base + oj * stride];
                        }
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::Unfold { x, k, stride }, vec![c * k * k, cols], data, ng))
    }

    /// Adjoint of [`Tape::unfold`]: scatter-add columns back into a
    /// [C,H,W] image.
    pub fn fold(
        &mut self,
        g: Var,
        k: usize,
        stride: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let s = &self.nodes[g.0].shape;
        let (oh, ow) = (conv_out(h, k, stride), conv_out(w, k, stride));
        if s.len() != 2 || s[0] != c * k * k || s[1] != oh * ow {
            return Err(Error::dimension(
                "fold",
                format!("{:?} into [{},{},{}] with k={}", s, c, h, w, k),
            ));
        }
        let cols = oh * ow;
        let src = &self.nodes[g.0].data;
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            let plane = &mut data[ci * h * w..(ci + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let row = (ci * k + di) * k + dj;
                    let src_row = &src[row * cols..(row + 1) * cols];
                    for oi in 0..oh {
                        let base = (oi * stride + di) * w + dj;
                        for oj in 0..ow {
                            plane[base + oj * stride] += src_row[oi * ow + oj];
                        }
                    }
                }
            }
        }
        let ng = self.nodes[g.0].needs_grad;
        Ok(self.push(Op::Fold { g, k, stride }, vec![c, h, w], data, ng))
    }

    /// [C,H,W] -> [C], summing each channel plane.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(Error::dimension("sum_spatial", format!("{:?}", s)));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let src = &self.nodes[x.0].data;
        let data = (0..c)
            .map(|ci| src[ci * hw..(ci + 1) * hw].iter().sum())
            .collect();
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::SumSpatial(x), vec![c], data, ng))
    }

    /// [C] -> [C,h,w], replicating each channel value over the plane.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 1 {
            return Err(Error::dimension("broadcast_spatial", format!("{:?}", s)));
        }
        let c = s[0];
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            data[ci * h * w..(ci + 1) * h * w].fill(src[ci]);
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::BroadcastSpatial(x), vec![c, h, w], data, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f32 = self.nodes[x.0].data.iter().sum();
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::SumAll(x), vec![1], vec![total], ng)
    }

    /// Replicate a one-element tensor to an arbitrary shape.
    pub fn broadcast_to(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if self.nodes[x.0].data.len() != 1 {
            return Err(Error::dimension(
                "broadcast_to",
                format!("{:?} is not a scalar", self.nodes[x.0].shape),
            ));
        }
        let numel: usize = shape.iter().product();
        let data = vec![self.nodes[x.0].data[0]; numel];
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::BroadcastTo(x), shape, data, ng))
    }

    // ── Composite network ops ────────────────────────────────────────

    /// Valid (no-padding) cross-correlation with square kernels.
    ///
    /// x: [C_in,H,W], w: [C_out,C_in,k,k], bias: [C_out] -> [C_out,oh,ow]
    /// where oh = (H-k)/stride + 1.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dimension(
                "conv2d",
                format!("input {:?}, kernel {:?}", sx, sw),
            ));
        }
        if sw[1] != sx[0] {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel expects {} channels, input has {}", sw[1], sx[0]),
            ));
        }
        let k = sw[2];
        if sx[1] < k || sx[2] < k {
            return Err(Error::dimension(
                "conv2d",
                format!("input {:?} smaller than kernel {:?}", sx, sw),
            ));
        }
        let (c_out, oh, ow) = (sw[0], conv_out(sx[1], k, stride), conv_out(sx[2], k, stride));
        let cols = self.unfold(x, k, stride)?;
        let wm = self.reshape(w, vec![c_out, sx[0] * k * k])?;
        let prod = self.matmul(wm, cols)?;
        let mut y = self.reshape(prod, vec![c_out, oh, ow])?;
        if let Some(b) = bias {
            let bb = self.broadcast_spatial(b, oh, ow)?;
            y = self.add(y, bb)?;
        }
        Ok(y)
    }

    /// [C,H,W] -> [C], averaging each channel plane.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(Error::dimension("mean_pool", format!("{:?}", s)));
        }
        let inv = 1.0 / (s[1] * s[2]) as f32;
        let summed = self.sum_spatial(x)?;
        Ok(self.scale(summed, inv))
    }

    /// w[out,d] * x[d] + b[out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 1 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(Error::dimension(
                "linear",
                format!("weights {:?} vs input {:?}", sw, sx),
            ));
        }
        let d = sx[0];
        let out = sw[0];
        let col = self.reshape(x, vec![d, 1])?;
        let prod = self.matmul(w, col)?;
        let flat = self.reshape(prod, vec![out])?;
        self.add(flat, b)
    }

    /// Scalar loss plus the probability vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<(Var, Var)> {
        let probs = self.softmax(logits)?;
        let loss = self.cross_entropy(logits, label)?;
        Ok((loss, probs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradient computations are recorded
    /// on the tape, so the returned gradients can be differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Contract(
                "backward on a value with no gradient dependencies".into(),
            ));
        }
        let horizon = loss.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; horizon];
        grads[loss.0] = Some(self.constant(vec![1], vec![1.0]));

        for id in (0..horizon).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op;
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    self.accumulate(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    let neg = self.scale(g, -1.0);
                    self.accumulate(&mut grads, b, neg)?;
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = self.mul(g, b)?;
                        self.accumulate(&mut grads, a, ga)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.mul(g, a)?;
                        self.accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::ScaleBy(a, s) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = self.scale_by(g, s)?;
                        self.accumulate(&mut grads, a, ga)?;
                    }
                    if self.nodes[s.0].needs_grad {
                        let prod = self.mul(g, a)?;
                        let gs = self.sum_all(prod);
                        self.accumulate(&mut grads, s, gs)?;
                    }
                }
                Op::Matmul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        self.accumulate(&mut grads, a, ga)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        self.accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Reshape(a) => {
                    let ga = self.reshape(g, self.nodes[a.0].shape.clone())?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink; the mask is constant, so
                    // second derivatives through relu are zero as they
                    // should be.
                    let mask: Vec<f32> = self.nodes[a.0]
                        .data
                        .iter()
                        .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    let mask = self.constant(self.nodes[a.0].shape.clone(), mask);
                    let ga = self.mul(g, mask)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Unfold { x, k, stride } => {
                    let s = self.nodes[x.0].shape.clone();
                    let ga = self.fold(g, k, stride, s[0], s[1], s[2])?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::Fold { g: src, k, stride } => {
                    let ga = self.unfold(g, k, stride)?;
                    self.accumulate(&mut grads, src, ga)?;
                }
                Op::SumSpatial(x) => {
                    let s = self.nodes[x.0].shape.clone();
                    let ga = self.broadcast_spatial(g, s[1], s[2])?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::BroadcastSpatial(x) => {
                    let ga = self.sum_spatial(g)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::SumAll(x) => {
                    let ga = self.broadcast_to(g, self.nodes[x.0].shape.clone())?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::BroadcastTo(x) => {
                    let ga = self.sum_all(g);
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::Softmax(x) => {
                    // dx = p * (g - <g, p>)
                    let p = Var(id);
                    let gp = self.mul(g, p)?;
                    let dot = self.sum_all(gp);
                    let spread = self.broadcast_to(dot, self.nodes[x.0].shape.clone())?;
                    let centered = self.sub(g, spread)?;
                    let ga = self.mul(p, centered)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::CrossEntropy { logits, label } => {
                    // dlogits = (softmax(logits) - onehot(label)) * g
                    let k = self.nodes[logits.0].shape[0];
                    let mut onehot = vec![0.0; k];
                    onehot[label] = 1.0;
                    let onehot = self.constant(vec![k], onehot);
                    let p = self.softmax(logits)?;
                    let diff = self.sub(p, onehot)?;
                    let ga = self.scale_by(diff, g)?;
                    self.accumulate(&mut grads, logits, ga)?;
                }
            }
        }
        Ok(GradMap { grads })
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], target: Var, g: Var) -> Result<()> {
        if !self.nodes[target.0].needs_grad {
            return Ok(());
        }
        grads[target.0] = Some(match grads[target.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f32>) -> Var {
        tape.leaf(shape, data, true)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2], vec![1.0, 0.0]);
        let b = tape.constant(vec![2, 1], vec![0.0, 5.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv2d_all_ones_window_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3, 3], vec![1.0; 9]);
        let w = tape.constant(vec![1, 1, 3, 3], vec![1.0; 9]);
        let y = tape.conv2d(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn conv2d_zero_kernel_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 7, 7], (0..98).map(|i| i as f32).collect());
        let w = tape.constant(vec![3, 2, 3, 3], vec![0.0; 54]);
        let y = tape.conv2d(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[3, 3, 3]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_rejects_small_input() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2, 2], vec![0.0; 4]);
        let w = tape.constant(vec![1, 1, 3, 3], vec![0.0; 9]);
        let err = tape.conv2d(x, w, None, 2).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let mut tape = Tape::new();
        for k in [2usize, 5, 9] {
            let logits = tape.constant(vec![k], vec![0.7; k]);
            let loss = tape.cross_entropy(logits, 0).unwrap();
            let expected = (k as f32).ln();
            assert!((tape.value(loss)[0] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![3], vec![0.0; 3]);
        let err = tape.cross_entropy(logits, 3).unwrap_err();
        assert!(matches!(err, Error::Label { label: 3, num_classes: 3 }));
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![4], vec![0.3, -1.2, 2.0, 0.5]);
        let (loss, probs) = tape.softmax_cross_entropy(logits, 2).unwrap();
        let p = tape.value(probs).to_vec();
        let grads = tape.backward(loss).unwrap();
        let g = tape.grad_value(&grads, logits).unwrap();
        for i in 0..4 {
            let expected = p[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((g[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_square_gives_double() {
        let mut tape = Tape::new();
        let theta = leaf(&mut tape, vec![1], vec![3.0]);
        let loss = tape.mul(theta, theta).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(tape.grad_value(&grads, theta).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let y = tape.relu(x);
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn reuse_accumulates_both_contributions() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, -0.5]);
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.sum_all(doubled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(tape.grad_value(&grads, x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn second_backward_differentiates_recorded_gradient() {
        // f(x) = x^3; f' = 3x^2 recorded on the tape; d(f')/dx = 6x.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![2.0]);
        let x2 = tape.mul(x, x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let grads = tape.backward(x3).unwrap();
        let first = grads.var(x).unwrap();
        assert_eq!(tape.value(first), &[12.0]);
        let grads2 = tape.backward(first).unwrap();
        assert_eq!(tape.grad_value(&grads2, x).unwrap(), &[12.0]);
    }

    #[test]
    fn input_copies_requires_grad_flag() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let v = tape.input(&t);
        assert!(!tape.needs_grad(v));
        let v2 = tape.input(&t.clone().with_grad());
        assert!(tape.needs_grad(v2));
    }
}
