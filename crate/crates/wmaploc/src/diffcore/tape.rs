use std::cell::RefCell;

use super::conv;
use super::tensor::Tensor;
use super::{DiffError, Result};

/// Lower/upper clamp for sigmoid outputs. Keeps the mask strictly inside
/// (0, 1) in double precision so its L1 gradient never vanishes exactly.
const SIGMOID_OPEN: f64 = 1e-15;

#[derive(Clone, Copy, PartialEq, Eq)]
enum MulBroadcast {
    None,
    /// lhs is [B,1,H,W], rhs is [B,C,H,W]
    Lhs,
    /// rhs is [B,1,H,W], lhs is [B,C,H,W]
    Rhs,
}

enum Op {
    Conv2d { stride: usize },
    MatMul,
    Add { bias: bool },
    Sub,
    Scale { factor: f64 },
    AddScalar,
    ElemMul { broadcast: MulBroadcast },
    Relu,
    Sigmoid,
    NearestUpsample2x,
    GlobalAvgPool,
    BatchNorm { training: bool, mean: Vec<f64>, invstd: Vec<f64> },
    ConcatChannels,
    GatherRows { indices: Vec<usize> },
    SoftmaxCrossEntropy,
    L2Distance,
    MeanAbs,
    MeanAll,
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::MatMul => "matmul",
            Op::Add { .. } => "add",
            Op::Sub => "sub",
            Op::Scale { .. } => "scale",
            Op::AddScalar => "add_scalar",
            Op::ElemMul { .. } => "elementwise_mul",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::NearestUpsample2x => "nearest_upsample_2x",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ConcatChannels => "concat_channels",
            Op::GatherRows { .. } => "gather_rows",
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy_with_soft_target",
            Op::L2Distance => "l2_distance",
            Op::MeanAbs => "mean_abs",
            Op::MeanAll => "mean_all",
            Op::Reshape => "reshape",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Records operation nodes in execution order and replays them in reverse to
/// populate gradients. A node is recorded iff any input requires gradients,
/// so evaluation-only forwards leave the tape empty. [`Tape::backward`]
/// consumes the recorded nodes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn err(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn finish(&self, op: Op, inputs: &[&Tensor], out: Tensor) -> Tensor {
        out.debug_assert_finite(op.name());
        if inputs.iter().any(|t| t.requires_grad()) {
            out.set_requires_grad(true);
            self.nodes.borrow_mut().push(Node {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: out.clone(),
            });
        }
        out
    }

    /// 3x3 convolution, zero padding 1. `x`: [B,Ci,H,W], `weight`: [Co,Ci,3,3].
    pub fn conv2d(&self, x: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
        if stride != 1 && stride != 2 {
            return Err(DiffError::BadAttribute {
                op: "conv2d",
                detail: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        let xs = x.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(err(
                "conv2d",
                format!("need x [B,Ci,H,W] and weight [Co,Ci,3,3], got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(err(
                "conv2d",
                format!("input channels {} != weight channels {}", xs[1], ws[1]),
            ));
        }
        let (b, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let oh = conv::conv_out_size(h, stride);
        let ow = conv::conv_out_size(w, stride);
        let mut out = vec![0.0; b * co * oh * ow];
        {
            let xv = x.values();
            let wv = weight.values();
            for bi in 0..b {
                conv::forward_single(
                    &xv[bi * ci * h * w..(bi + 1) * ci * h * w],
                    &wv,
                    &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow],
                    ci,
                    co,
                    h,
                    w,
                    stride,
                );
            }
        }
        let out = Tensor::new(&[b, co, oh, ow], out)?;
        Ok(self.finish(Op::Conv2d { stride }, &[x, weight], out))
    }

    /// `a`: [M,K] times `b`: [K,N].
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(err("matmul", format!("incompatible shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let alpha = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, bvv) in orow.iter_mut().zip(brow.iter()) {
                        *o = bvv.mul_add(alpha, *o);
                    }
                }
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.finish(Op::MatMul, &[a, b], out))
    }

    /// Elementwise add; additionally accepts a rank-1 `b` of length C added
    /// per row of [B,C] or per channel of [B,C,H,W] (bias add).
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa == sb {
            let out: Vec<f64> = {
                let (av, bv) = (a.values(), b.values());
                av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
            };
            let out = Tensor::new(&sa, out)?;
            return Ok(self.finish(Op::Add { bias: false }, &[a, b], out));
        }
        let bias_ok = sb.len() == 1
            && ((sa.len() == 2 && sa[1] == sb[0]) || (sa.len() == 4 && sa[1] == sb[0]));
        if !bias_ok {
            return Err(err("add", format!("incompatible shapes {sa:?} + {sb:?}")));
        }
        let c = sb[0];
        let spatial: usize = if sa.len() == 4 { sa[2] * sa[3] } else { 1 };
        let mut out = a.to_vec();
        {
            let bv = b.values();
            for chunk in out.chunks_mut(c * spatial) {
                for (ch, sub) in chunk.chunks_mut(spatial).enumerate() {
                    let beta = bv[ch];
                    for v in sub.iter_mut() {
                        *v += beta;
                    }
                }
            }
        }
        let out = Tensor::new(&sa, out)?;
        Ok(self.finish(Op::Add { bias: true }, &[a, b], out))
    }

    /// Elementwise `a - b`, same shapes.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(err("sub", format!("incompatible shapes {sa:?} - {sb:?}")));
        }
        let out: Vec<f64> = {
            let (av, bv) = (a.values(), b.values());
            av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect()
        };
        let out = Tensor::new(&sa, out)?;
        Ok(self.finish(Op::Sub, &[a, b], out))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|v| v * factor).collect();
        let out = Tensor::new(&x.shape(), out)?;
        Ok(self.finish(Op::Scale { factor }, &[x], out))
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, x: &Tensor, offset: f64) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|v| v + offset).collect();
        let out = Tensor::new(&x.shape(), out)?;
        Ok(self.finish(Op::AddScalar, &[x], out))
    }

    /// `1 - x`; convenience for background masks.
    pub fn one_minus(&self, x: &Tensor) -> Result<Tensor> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(&neg, 1.0)
    }

    /// Elementwise product. Same shapes, or one side [B,1,H,W] broadcast
    /// across the channels of the other [B,C,H,W] (mask weighting).
    pub fn elementwise_mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        let broadcast = if sa == sb {
            MulBroadcast::None
        } else if sa.len() == 4
            && sb.len() == 4
            && sa[0] == sb[0]
            && sa[2] == sb[2]
            && sa[3] == sb[3]
        {
            if sb[1] == 1 && sa[1] > 1 {
                MulBroadcast::Rhs
            } else if sa[1] == 1 && sb[1] > 1 {
                MulBroadcast::Lhs
            } else {
                return Err(err("elementwise_mul", format!("incompatible shapes {sa:?} * {sb:?}")));
            }
        } else {
            return Err(err("elementwise_mul", format!("incompatible shapes {sa:?} * {sb:?}")));
        };
        let out = {
            let (av, bv) = (a.values(), b.values());
            match broadcast {
                MulBroadcast::None => av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect(),
                MulBroadcast::Rhs => mul_mask(&av, &bv, &sa),
                MulBroadcast::Lhs => mul_mask(&bv, &av, &sb),
            }
        };
        let shape = if broadcast == MulBroadcast::Lhs { sb } else { sa };
        let out = Tensor::new(&shape, out)?;
        Ok(self.finish(Op::ElemMul { broadcast }, &[a, b], out))
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(&x.shape(), out)?;
        Ok(self.finish(Op::Relu, &[x], out))
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x
            .values()
            .iter()
            .map(|&v| {
                let s = if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                };
                s.clamp(SIGMOID_OPEN, 1.0 - SIGMOID_OPEN)
            })
            .collect();
        let out = Tensor::new(&x.shape(), out)?;
        Ok(self.finish(Op::Sigmoid, &[x], out))
    }

    /// Nearest-neighbor 2x spatial upsampling of [B,C,H,W].
    pub fn nearest_upsample_2x(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(err("nearest_upsample_2x", format!("need [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        {
            let xv = x.values();
            for plane in 0..b * c {
                let src = &xv[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..h {
                    for x_ in 0..w {
                        let v = src[y * w + x_];
                        let base = 2 * y * ow + 2 * x_;
                        dst[base] = v;
                        dst[base + 1] = v;
                        dst[base + ow] = v;
                        dst[base + ow + 1] = v;
                    }
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.finish(Op::NearestUpsample2x, &[x], out))
    }

    /// Spatial mean of [B,C,H,W] down to [B,C].
    pub fn global_avg_pool(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(err("global_avg_pool", format!("need [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let n = (h * w) as f64;
        let mut out = vec![0.0; b * c];
        {
            let xv = x.values();
            for (plane, o) in out.iter_mut().enumerate() {
                *o = xv[plane * h * w..(plane + 1) * h * w].iter().sum::<f64>() / n;
            }
        }
        let out = Tensor::new(&[b, c], out)?;
        Ok(self.finish(Op::GlobalAvgPool, &[x], out))
    }

    /// Per-channel batch normalization of [B,C,H,W].
    ///
    /// In training mode the batch statistics normalize and the running
    /// buffers are updated in place (`r <- (1-momentum) r + momentum s`,
    /// variance unbiased); in eval mode the running buffers make this a
    /// deterministic affine map. The running buffers are not differentiable
    /// inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(err("batch_norm", format!("need [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.shape() != [c] {
                return Err(err(
                    "batch_norm",
                    format!("{name} must have shape [{c}], got {:?}", t.shape()),
                ));
            }
        }
        let plane = h * w;
        let n = b * plane;
        let (mean, var) = if training {
            // single pass: sum and sum of squares per channel (f64 keeps
            // the cancellation harmless at activation magnitudes)
            let xv = x.values();
            let mut sum = vec![0.0; c];
            let mut sumsq = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    let (mut s1, mut s2) = (0.0f64, 0.0f64);
                    for &v in &xv[base..base + plane] {
                        s1 += v;
                        s2 = v.mul_add(v, s2);
                    }
                    sum[ch] += s1;
                    sumsq[ch] += s2;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let var: Vec<f64> = sumsq
                .iter()
                .zip(&mean)
                .map(|(s2, m)| (s2 / n as f64 - m * m).max(0.0))
                .collect();
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; b * c * plane];
        {
            let xv = x.values();
            let gv = gamma.values();
            let bv = beta.values();
            // y = a*x + b with per-channel a, b folded once
            let scale: Vec<f64> = (0..c).map(|ch| gv[ch] * invstd[ch]).collect();
            let shift: Vec<f64> =
                (0..c).map(|ch| bv[ch] - gv[ch] * invstd[ch] * mean[ch]).collect();
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    let (a, sh) = (scale[ch], shift[ch]);
                    for (o, v) in out[base..base + plane].iter_mut().zip(&xv[base..base + plane]) {
                        *o = v.mul_add(a, sh);
                    }
                }
            }
        }
        if training {
            let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            let mut rm = running_mean.to_vec();
            let mut rv = running_var.to_vec();
            for ch in 0..c {
                rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean[ch];
                rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var[ch] * unbias;
            }
            running_mean.set_values(&rm);
            running_var.set_values(&rv);
        }
        let out = Tensor::new(&s, out)?;
        Ok(self.finish(Op::BatchNorm { training, mean, invstd }, &[x, gamma, beta], out))
    }

    /// Concatenate [B,Ci,H,W] tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(err("concat_channels", "no inputs".into()));
        }
        let first = xs[0].shape();
        if first.len() != 4 {
            return Err(err("concat_channels", format!("need [B,C,H,W], got {first:?}")));
        }
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(xs.len());
        for t in xs {
            let s = t.shape();
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(err(
                    "concat_channels",
                    format!("incompatible input shapes {first:?} vs {s:?}"),
                ));
            }
            channels.push(s[1]);
        }
        let ctotal: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = vec![0.0; b * ctotal * plane];
        for bi in 0..b {
            let mut co = 0;
            for (t, &ci) in xs.iter().zip(&channels) {
                let tv = t.values();
                let src = &tv[bi * ci * plane..(bi + 1) * ci * plane];
                let dst = &mut out[(bi * ctotal + co) * plane..(bi * ctotal + co + ci) * plane];
                dst.copy_from_slice(src);
                co += ci;
            }
        }
        let out = Tensor::new(&[b, ctotal, h, w], out)?;
        Ok(self.finish(Op::ConcatChannels, xs, out))
    }

    /// Select rows of a [N,E] tensor by index, allowing repeats. The
    /// backward pass scatter-adds into the source rows.
    pub fn gather_rows(&self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(err("gather_rows", format!("need [N,E], got {s:?}")));
        }
        let (n, e) = (s[0], s[1]);
        if let Some(bad) = indices.iter().find(|i| **i >= n) {
            return Err(DiffError::BadAttribute {
                op: "gather_rows",
                detail: format!("index {bad} out of range for {n} rows"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * e);
        {
            let xv = x.values();
            for &i in indices {
                out.extend_from_slice(&xv[i * e..(i + 1) * e]);
            }
        }
        let out = Tensor::new(&[indices.len(), e], out)?;
        Ok(self.finish(Op::GatherRows { indices: indices.to_vec() }, &[x], out))
    }

    /// Mean over the batch of `sum_c target[c] * (logsumexp(z) - z[c])`.
    ///
    /// `logits`: [B,D]; `target`: [B,D], a constant distribution per row
    /// (gradients never flow into it; passing a grad-requiring target is an
    /// error so a detached copy must be made explicitly).
    pub fn softmax_cross_entropy_with_soft_target(
        &self,
        logits: &Tensor,
        target: &Tensor,
    ) -> Result<Tensor> {
        let (sl, st) = (logits.shape(), target.shape());
        if sl.len() != 2 || sl != st {
            return Err(err(
                "softmax_cross_entropy_with_soft_target",
                format!("need matching [B,D], got {sl:?} and {st:?}"),
            ));
        }
        if target.requires_grad() {
            return Err(DiffError::BadAttribute {
                op: "softmax_cross_entropy_with_soft_target",
                detail: "target must be detached (constant)".into(),
            });
        }
        let (b, d) = (sl[0], sl[1]);
        let mut total = 0.0;
        {
            let zv = logits.values();
            let tv = target.values();
            for row in 0..b {
                let z = &zv[row * d..(row + 1) * d];
                let t = &tv[row * d..(row + 1) * d];
                let lse = log_sum_exp(z);
                total += t.iter().zip(z.iter()).map(|(tc, zc)| tc * (lse - zc)).sum::<f64>();
            }
        }
        let out = Tensor::scalar(total / b as f64);
        Ok(self.finish(Op::SoftmaxCrossEntropy, &[logits, target], out))
    }

    /// Row-wise Euclidean distance between [B,E] tensors, producing [B].
    pub fn l2_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sa != sb {
            return Err(err("l2_distance", format!("need matching [B,E], got {sa:?} and {sb:?}")));
        }
        let (rows, e) = (sa[0], sa[1]);
        let mut out = vec![0.0; rows];
        {
            let (av, bv) = (a.values(), b.values());
            for (r, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..e {
                    let d = av[r * e + j] - bv[r * e + j];
                    acc = d.mul_add(d, acc);
                }
                *o = acc.sqrt();
            }
        }
        let out = Tensor::new(&[rows], out)?;
        Ok(self.finish(Op::L2Distance, &[a, b], out))
    }

    /// Mean of absolute values, over every element.
    pub fn mean_abs(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel() as f64;
        let total: f64 = x.values().iter().map(|v| v.abs()).sum();
        let out = Tensor::scalar(total / n);
        Ok(self.finish(Op::MeanAbs, &[x], out))
    }

    /// Mean of all elements.
    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel() as f64;
        let total: f64 = x.values().iter().sum();
        let out = Tensor::scalar(total / n);
        Ok(self.finish(Op::MeanAll, &[x], out))
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(err(
                "reshape",
                format!("cannot reshape {:?} ({} values) to {shape:?}", x.shape(), x.numel()),
            ));
        }
        let out = Tensor::new(shape, x.to_vec())?;
        Ok(self.finish(Op::Reshape, &[x], out))
    }

    /// Reverse sweep from a scalar loss. Populates the `grad` of every
    /// grad-requiring tensor reachable from the loss, then clears the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(DiffError::NonScalarLoss(loss.shape()));
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if nodes.is_empty() {
            return Err(DiffError::BadAttribute {
                op: "backward",
                detail: "tape is empty (no recorded operations)".into(),
            });
        }
        loss.accumulate_grad(|g| g[0] += 1.0);
        for node in nodes.iter().rev() {
            let Some(gout) = node.output.grad() else { continue };
            backward_node(node, &gout);
        }
        Ok(())
    }
}

fn mul_mask(full: &[f64], mask: &[f64], full_shape: &[usize]) -> Vec<f64> {
    let (b, c, h, w) = (full_shape[0], full_shape[1], full_shape[2], full_shape[3]);
    let plane = h * w;
    let mut out = vec![0.0; full.len()];
    for bi in 0..b {
        let m = &mask[bi * plane..(bi + 1) * plane];
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for ((o, f), mv) in out[base..base + plane].iter_mut().zip(&full[base..base + plane]).zip(m) {
                *o = f * mv;
            }
        }
    }
    out
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable row-wise softmax over a [rows, cols] buffer. Forward
/// only; the cross-entropy op handles the differentiable path.
pub fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(logits.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let z = &logits[r * cols..(r + 1) * cols];
        let lse = log_sum_exp(z);
        for (o, vz) in out[r * cols..(r + 1) * cols].iter_mut().zip(z) {
            *o = (vz - lse).exp();
        }
    }
    out
}

/// Dispatch one node's gradient contributions. Contributions are computed
/// into local buffers first (immutable borrows only), then accumulated, so a
/// tensor appearing as several inputs of one node stays sound.
fn backward_node(node: &Node, gout: &[f64]) {
    let needs: Vec<bool> = node.inputs.iter().map(|t| t.requires_grad()).collect();
    match &node.op {
        Op::Conv2d { stride } => {
            let (x, wt) = (&node.inputs[0], &node.inputs[1]);
            let xs = x.shape();
            let (b, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let co = wt.shape()[0];
            let oh = conv::conv_out_size(h, *stride);
            let ow = conv::conv_out_size(w, *stride);
            if needs[0] {
                let mut dx = vec![0.0; x.numel()];
                {
                    let wv = wt.values();
                    for bi in 0..b {
                        conv::backward_input_single(
                            &gout[bi * co * oh * ow..(bi + 1) * co * oh * ow],
                            &wv,
                            &mut dx[bi * ci * h * w..(bi + 1) * ci * h * w],
                            ci,
                            co,
                            h,
                            w,
                            *stride,
                        );
                    }
                }
                x.accumulate_grad(|g| add_into(g, &dx));
            }
            if needs[1] {
                let mut dw = vec![0.0; wt.numel()];
                {
                    let xv = x.values();
                    for bi in 0..b {
                        conv::backward_weight_single(
                            &xv[bi * ci * h * w..(bi + 1) * ci * h * w],
                            &gout[bi * co * oh * ow..(bi + 1) * co * oh * ow],
                            &mut dw,
                            ci,
                            co,
                            h,
                            w,
                            *stride,
                        );
                    }
                }
                wt.accumulate_grad(|g| add_into(g, &dw));
            }
        }
        Op::MatMul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if needs[0] {
                let mut da = vec![0.0; m * k];
                {
                    let bv = b.values();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &gout[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for (gv, bvv) in grow.iter().zip(brow.iter()) {
                                acc = gv.mul_add(*bvv, acc);
                            }
                            da[i * k + p] = acc;
                        }
                    }
                }
                a.accumulate_grad(|g| add_into(g, &da));
            }
            if needs[1] {
                let mut db = vec![0.0; k * n];
                {
                    let av = a.values();
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let alpha = av[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow.iter()) {
                                *d = gv.mul_add(alpha, *d);
                            }
                        }
                    }
                }
                b.accumulate_grad(|g| add_into(g, &db));
            }
        }
        Op::Add { bias } => {
            if needs[0] {
                node.inputs[0].accumulate_grad(|g| add_into(g, gout));
            }
            if needs[1] {
                if !bias {
                    node.inputs[1].accumulate_grad(|g| add_into(g, gout));
                } else {
                    let sa = node.inputs[0].shape();
                    let c = node.inputs[1].numel();
                    let spatial: usize = if sa.len() == 4 { sa[2] * sa[3] } else { 1 };
                    let mut db = vec![0.0; c];
                    for chunk in gout.chunks(c * spatial) {
                        for (ch, sub) in chunk.chunks(spatial).enumerate() {
                            db[ch] += sub.iter().sum::<f64>();
                        }
                    }
                    node.inputs[1].accumulate_grad(|g| add_into(g, &db));
                }
            }
        }
        Op::Sub => {
            if needs[0] {
                node.inputs[0].accumulate_grad(|g| add_into(g, gout));
            }
            if needs[1] {
                node.inputs[1].accumulate_grad(|g| {
                    for (gv, d) in g.iter_mut().zip(gout.iter()) {
                        *gv -= d;
                    }
                });
            }
        }
        Op::Scale { factor } => {
            if needs[0] {
                let f = *factor;
                node.inputs[0].accumulate_grad(|g| {
                    for (gv, d) in g.iter_mut().zip(gout.iter()) {
                        *gv = d.mul_add(f, *gv);
                    }
                });
            }
        }
        Op::AddScalar | Op::Reshape => {
            if needs[0] {
                node.inputs[0].accumulate_grad(|g| add_into(g, gout));
            }
        }
        Op::ElemMul { broadcast } => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            match broadcast {
                MulBroadcast::None => {
                    if needs[0] {
                        let da: Vec<f64> =
                            b.values().iter().zip(gout.iter()).map(|(bv, g)| bv * g).collect();
                        a.accumulate_grad(|g| add_into(g, &da));
                    }
                    if needs[1] {
                        let db: Vec<f64> =
                            a.values().iter().zip(gout.iter()).map(|(av, g)| av * g).collect();
                        b.accumulate_grad(|g| add_into(g, &db));
                    }
                }
                MulBroadcast::Rhs => mul_mask_backward(a, b, gout, needs[0], needs[1]),
                MulBroadcast::Lhs => mul_mask_backward(b, a, gout, needs[1], needs[0]),
            }
        }
        Op::Relu => {
            if needs[0] {
                let dx: Vec<f64> = node.inputs[0]
                    .values()
                    .iter()
                    .zip(gout.iter())
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                node.inputs[0].accumulate_grad(|g| add_into(g, &dx));
            }
        }
        Op::Sigmoid => {
            if needs[0] {
                let dx: Vec<f64> = node
                    .output
                    .values()
                    .iter()
                    .zip(gout.iter())
                    .map(|(y, g)| y * (1.0 - y) * g)
                    .collect();
                node.inputs[0].accumulate_grad(|g| add_into(g, &dx));
            }
        }
        Op::NearestUpsample2x => {
            if needs[0] {
                let s = node.inputs[0].shape();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let ow = 2 * w;
                let mut dx = vec![0.0; node.inputs[0].numel()];
                for plane in 0..bc {
                    let src = &gout[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        for x_ in 0..w {
                            let base = 2 * y * ow + 2 * x_;
                            dst[y * w + x_] =
                                src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
                        }
                    }
                }
                node.inputs[0].accumulate_grad(|g| add_into(g, &dx));
            }
        }
        Op::GlobalAvgPool => {
            if needs[0] {
                let s = node.inputs[0].shape();
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let mut dx = vec![0.0; node.inputs[0].numel()];
                for (p, g) in gout.iter().enumerate() {
                    let v = g * inv;
                    for d in dx[p * plane..(p + 1) * plane].iter_mut() {
                        *d = v;
                    }
                }
                node.inputs[0].accumulate_grad(|g| add_into(g, &dx));
            }
        }
        Op::BatchNorm { training, mean, invstd } => {
            let (x, gamma) = (&node.inputs[0], &node.inputs[1]);
            let s = x.shape();
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            let plane = h * w;
            let n = (b * plane) as f64;
            // dgamma, dbeta always via xhat recomputed from saved stats
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dot_gxhat = vec![0.0; c]; // sum of gout * xhat per channel
            {
                let xv = x.values();
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        let (m, is) = (mean[ch], invstd[ch]);
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for (g, v) in gout[base..base + plane].iter().zip(&xv[base..base + plane]) {
                            sg += g;
                            sgx = g.mul_add((v - m) * is, sgx);
                        }
                        dbeta[ch] += sg;
                        dot_gxhat[ch] += sgx;
                    }
                }
            }
            dgamma.copy_from_slice(&dot_gxhat);
            if needs[0] {
                let mut dx = vec![0.0; x.numel()];
                {
                    let gv = gamma.values();
                    let xv = x.values();
                    if *training {
                        // per channel: dx = g*is*(gout - mean(gout) - xhat*mean(gout*xhat))
                        let mut sum_g = vec![0.0; c];
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * plane;
                                sum_g[ch] += gout[base..base + plane].iter().sum::<f64>();
                            }
                        }
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * plane;
                                let (m, is, ga) = (mean[ch], invstd[ch], gv[ch]);
                                let mg = sum_g[ch] / n;
                                let mgx = dot_gxhat[ch] / n;
                                for ((d, g), v) in dx[base..base + plane]
                                    .iter_mut()
                                    .zip(&gout[base..base + plane])
                                    .zip(&xv[base..base + plane])
                                {
                                    let xhat = (v - m) * is;
                                    *d = ga * is * (g - mg - xhat * mgx);
                                }
                            }
                        }
                    } else {
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * plane;
                                let scale = gv[ch] * invstd[ch];
                                for (d, g) in
                                    dx[base..base + plane].iter_mut().zip(&gout[base..base + plane])
                                {
                                    *d = g * scale;
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(|g| add_into(g, &dx));
            }
            if needs[1] {
                gamma.accumulate_grad(|g| add_into(g, &dgamma));
            }
            if needs[2] {
                node.inputs[2].accumulate_grad(|g| add_into(g, &dbeta));
            }
        }
        Op::GatherRows { indices } => {
            if needs[0] {
                let e = node.inputs[0].shape()[1];
                let mut dx = vec![0.0; node.inputs[0].numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, g) in dx[i * e..(i + 1) * e].iter_mut().zip(&gout[k * e..(k + 1) * e]) {
                        *d += g;
                    }
                }
                node.inputs[0].accumulate_grad(|g| add_into(g, &dx));
            }
        }
        Op::ConcatChannels => {
            let out_shape = node.output.shape();
            let (b, ctotal, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let plane = h * w;
            let mut co = 0;
            for (idx, t) in node.inputs.iter().enumerate() {
                let ci = t.shape()[1];
                if needs[idx] {
                    let mut dt = vec![0.0; t.numel()];
                    for bi in 0..b {
                        let src = &gout[(bi * ctotal + co) * plane..(bi * ctotal + co + ci) * plane];
                        dt[bi * ci * plane..(bi + 1) * ci * plane].copy_from_slice(src);
                    }
                    t.accumulate_grad(|g| add_into(g, &dt));
                }
                co += ci;
            }
        }
        Op::SoftmaxCrossEntropy => {
            if needs[0] {
                let (z, t) = (&node.inputs[0], &node.inputs[1]);
                let s = z.shape();
                let (b, d) = (s[0], s[1]);
                let go = gout[0];
                let mut dz = vec![0.0; b * d];
                {
                    let zv = z.values();
                    let tv = t.values();
                    for row in 0..b {
                        let zr = &zv[row * d..(row + 1) * d];
                        let tr = &tv[row * d..(row + 1) * d];
                        let lse = log_sum_exp(zr);
                        let tsum: f64 = tr.iter().sum();
                        for j in 0..d {
                            let q = (zr[j] - lse).exp();
                            dz[row * d + j] = go * (q * tsum - tr[j]) / b as f64;
                        }
                    }
                }
                z.accumulate_grad(|g| add_into(g, &dz));
            }
        }
        Op::L2Distance => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            let s = a.shape();
            let (rows, e) = (s[0], s[1]);
            let mut da = vec![0.0; rows * e];
            {
                let av = a.values();
                let bv = b.values();
                let dv = node.output.values();
                for r in 0..rows {
                    // At zero distance the subgradient is taken as zero.
                    if dv[r] > 0.0 {
                        let scale = gout[r] / dv[r];
                        for j in 0..e {
                            da[r * e + j] = (av[r * e + j] - bv[r * e + j]) * scale;
                        }
                    }
                }
            }
            if needs[0] {
                a.accumulate_grad(|g| add_into(g, &da));
            }
            if needs[1] {
                b.accumulate_grad(|g| {
                    for (gv, d) in g.iter_mut().zip(da.iter()) {
                        *gv -= d;
                    }
                });
            }
        }
        Op::MeanAbs => {
            if needs[0] {
                let n = node.inputs[0].numel() as f64;
                let go = gout[0] / n;
                let dx: Vec<f64> = node.inputs[0]
                    .values()
                    .iter()
                    .map(|v| {
                        if *v > 0.0 {
                            go
                        } else if *v < 0.0 {
                            -go
                        } else {
                            0.0
                        }
                    })
                    .collect();
                node.inputs[0].accumulate_grad(|g| add_into(g, &dx));
            }
        }
        Op::MeanAll => {
            if needs[0] {
                let n = node.inputs[0].numel() as f64;
                let go = gout[0] / n;
                node.inputs[0].accumulate_grad(|g| {
                    for gv in g.iter_mut() {
                        *gv += go;
                    }
                });
            }
        }
    }
}

fn mul_mask_backward(full: &Tensor, mask: &Tensor, gout: &[f64], need_full: bool, need_mask: bool) {
    let s = full.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    if need_full {
        let mut df = vec![0.0; full.numel()];
        {
            let mv = mask.values();
            for bi in 0..b {
                let m = &mv[bi * plane..(bi + 1) * plane];
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    for ((d, g), mm) in df[base..base + plane].iter_mut().zip(&gout[base..base + plane]).zip(m)
                    {
                        *d = g * mm;
                    }
                }
            }
        }
        full.accumulate_grad(|g| add_into(g, &df));
    }
    if need_mask {
        let mut dm = vec![0.0; mask.numel()];
        {
            let fv = full.values();
            for bi in 0..b {
                let dmp = &mut dm[bi * plane..(bi + 1) * plane];
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    for ((d, g), f) in dmp.iter_mut().zip(&gout[base..base + plane]).zip(&fv[base..base + plane])
                    {
                        *d = g.mul_add(*f, *d);
                    }
                }
            }
        }
        mask.accumulate_grad(|g| add_into(g, &dm));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}
