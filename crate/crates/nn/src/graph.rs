//! Reverse-mode autodiff over a flat tape.
//!
//! Each forward op pushes one node; `backward` walks the tape in reverse and
//! accumulates gradients into parents. Nodes that never lead back to a
//! gradient-requiring leaf are skipped entirely, which is how frozen teacher
//! activations stay non-differentiable when injected as constants.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{NnError, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{strides_of, Element, Parameter, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Sparse row-combination plan: `out[r] = Σ_(j,w)∈rows[r] w · input[j]`.
///
/// Serves voxel→point KNN interpolation (k weighted entries per row) and
/// z-buffered feature projection (one unit entry per covered pixel, empty
/// rows stay zero).
#[derive(Debug)]
pub struct RowMixPlan<T> {
    pub input_rows: usize,
    pub rows: Vec<Vec<(u32, T)>>,
}

enum Op<T: Element> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { a: usize, bias: usize },
    Scale { a: usize, k: T },
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Permute { a: usize, axes: Vec<usize> },
    Reshape { a: usize },
    Concat { axis: usize, parts: Vec<usize> },
    RowMix { a: usize, plan: Arc<RowMixPlan<T>> },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: T },
    BatchNorm { x: usize, gamma: usize, beta: usize, eps: T, mean: Tensor<T>, var: Tensor<T>, batch_stats: bool },
    Conv { x: usize, w: usize, b: Option<usize>, dims: ConvDims },
    Upsample3d { a: usize, factor: usize },
    Sum(usize),
    Mean(usize),
}

pub struct Graph<T: Element> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<(String, usize)>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), needs_grad: Vec::new(), grads: Vec::new(), bindings: Vec::new() }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Value {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is retained (for inputs under test).
    pub fn input(&mut self, t: Tensor<T>) -> Value {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; frozen parameters get no gradient.
    pub fn param(&mut self, p: &Parameter<T>) -> Value {
        let v = self.push(p.tensor.clone(), Op::Leaf, !p.frozen);
        self.bindings.push((p.name.clone(), v.0));
        v
    }

    pub fn value(&self, v: Value) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradients for every bound parameter that received one.
    pub fn param_grads(&self) -> HashMap<String, Tensor<T>> {
        let mut out: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, idx) in &self.bindings {
            if let Some(g) = self.grads.get(*idx).and_then(|g| g.as_ref()) {
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs: bool) -> Value {
        debug_assert!(value.all_finite(), "non-finite forward value at node {}", self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Value(self.values.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.needs_grad[i])
    }

    // ---- elementwise / structural ops ----

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("add", a, b)?;
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), needs))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("sub", a, b)?;
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), needs))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("mul", a, b)?;
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), needs))
    }

    /// `a + bias` where `bias` has the shape of `a`'s last axis.
    pub fn add_bias(&mut self, a: Value, bias: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let n = *sa.last().unwrap_or(&0);
        if sb != [n] {
            return Err(NnError::shape("add_bias", format!("input {:?} vs bias {:?}", sa, sb)));
        }
        let bv = self.values[bias.0].data().to_vec();
        let mut out = self.values[a.0].clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        let needs = self.needs(&[a.0, bias.0]);
        Ok(self.push(out, Op::AddBias { a: a.0, bias: bias.0 }, needs))
    }

    pub fn scale(&mut self, a: Value, k: T) -> Result<Value> {
        let out = self.values[a.0].map(|x| x * k);
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Scale { a: a.0, k }, needs))
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        let out = self.values[a.0].map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Relu(a.0), needs))
    }

    pub fn gelu(&mut self, a: Value) -> Result<Value> {
        let out = self.values[a.0].map(gelu_fwd);
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Gelu(a.0), needs))
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        let out = self.values[a.0].map(sigmoid_fwd);
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Sigmoid(a.0), needs))
    }

    pub fn sin(&mut self, a: Value) -> Result<Value> {
        let out = self.values[a.0].map(|x| x.sin());
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Sin(a.0), needs))
    }

    pub fn cos(&mut self, a: Value) -> Result<Value> {
        let out = self.values[a.0].map(|x| x.cos());
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Cos(a.0), needs))
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, a: Value) -> Result<Value> {
        let t = &self.values[a.0];
        let n = *t.shape().last().ok_or_else(|| NnError::shape("softmax", "rank-0 input"))?;
        if n == 0 {
            return Err(NnError::shape("softmax", "empty last axis"));
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Softmax(a.0), needs))
    }

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let mut acc = T::zero();
        for &v in self.values[a.0].data() {
            acc = acc + v;
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor::scalar(acc), Op::Sum(a.0), needs))
    }

    pub fn mean(&mut self, a: Value) -> Result<Value> {
        let n = self.values[a.0].numel();
        if n == 0 {
            return Err(NnError::shape("mean", "empty input"));
        }
        let mut acc = T::zero();
        for &v in self.values[a.0].data() {
            acc = acc + v;
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor::scalar(acc / T::from_f64(n as f64)), Op::Mean(a.0), needs))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let t = &self.values[a.0];
        if t.numel() != shape.iter().product::<usize>() {
            return Err(NnError::shape("reshape", format!("{:?} -> {:?}", t.shape(), shape)));
        }
        let out = t.clone().reshaped(shape);
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Reshape { a: a.0 }, needs))
    }

    pub fn permute(&mut self, a: Value, axes: &[usize]) -> Result<Value> {
        let t = &self.values[a.0];
        if axes.len() != t.shape().len() || {
            let mut seen = vec![false; axes.len()];
            axes.iter().any(|&ax| {
                if ax >= seen.len() || seen[ax] {
                    true
                } else {
                    seen[ax] = true;
                    false
                }
            })
        } {
            return Err(NnError::shape("permute", format!("axes {:?} for shape {:?}", axes, t.shape())));
        }
        let out = permute_tensor(t, axes);
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Permute { a: a.0, axes: axes.to_vec() }, needs))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(NnError::shape("concat", "no parts"));
        }
        let first = self.values[parts[0].0].shape().to_vec();
        if axis >= first.len() {
            return Err(NnError::shape("concat", format!("axis {} for rank {}", axis, first.len())));
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = self.values[p.0].shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(NnError::shape(
                    "concat",
                    format!("incompatible part {:?} vs {:?} along axis {}", s, first, axis),
                ));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0usize;
        for p in parts {
            let t = &self.values[p.0];
            let pa = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::new(&out_shape, data), Op::Concat { axis, parts: ids }, needs))
    }

    /// Sparse weighted row combination of a `[rows, width]` input.
    pub fn row_mix(&mut self, a: Value, plan: Arc<RowMixPlan<T>>) -> Result<Value> {
        let t = &self.values[a.0];
        let s = t.shape();
        if s.len() != 2 || s[0] != plan.input_rows {
            return Err(NnError::shape(
                "row_mix",
                format!("input {:?}, plan expects [{}, _]", s, plan.input_rows),
            ));
        }
        let width = s[1];
        let mut data = vec![T::zero(); plan.rows.len() * width];
        for (r, entries) in plan.rows.iter().enumerate() {
            let dst = &mut data[r * width..(r + 1) * width];
            for &(j, w) in entries {
                let src = &t.data()[j as usize * width..(j as usize + 1) * width];
                for (d, &sv) in dst.iter_mut().zip(src) {
                    *d = *d + w * sv;
                }
            }
        }
        let out = Tensor::new(&[plan.rows.len(), width], data);
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::RowMix { a: a.0, plan }, needs))
    }

    /// Batched matmul `[..B, m, k] × [..B, k, n]`, identical leading dims.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(NnError::shape("matmul", format!("lhs {:?} vs rhs {:?}", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(NnError::shape("matmul", format!("inner axes {} vs {} ({:?} × {:?})", k, k2, sa, sb)));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let data = kernels::bmm(self.values[a.0].data(), self.values[b.0].data(), batch, m, k, n, false, false);
        let mut out_shape = sa.clone();
        let l = out_shape.len();
        out_shape[l - 1] = n;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&out_shape, data),
            Op::MatMul { a: a.0, b: b.0, batch, m, k, n },
            needs,
        ))
    }

    /// Layer norm over the last axis with learned affine parameters.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: T) -> Result<Value> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| NnError::shape("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(NnError::shape(
                "layer_norm",
                format!("affine shapes {:?}/{:?} vs last axis {}", self.shape(gamma), self.shape(beta), n),
            ));
        }
        let g = self.values[gamma.0].data().to_vec();
        let bta = self.values[beta.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        let inv_n = T::from_f64(1.0 / n as f64);
        for row in out.data_mut().chunks_mut(n) {
            let mut mean = T::zero();
            for &v in row.iter() {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in row.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[i] + bta[i];
            }
        }
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, needs))
    }

    /// Batch norm over axis 0 channels of `[C, ...]` using batch statistics.
    /// Returns the node plus the per-channel mean/var so callers can maintain
    /// running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        eps: T,
    ) -> Result<(Value, Tensor<T>, Tensor<T>)> {
        let s = self.shape(x).to_vec();
        let c = *s.first().ok_or_else(|| NnError::shape("batch_norm", "rank-0 input"))?;
        let (mean, var) = channel_stats(&self.values[x.0], c);
        let v = self.batch_norm_with(x, gamma, beta, mean.clone(), var.clone(), eps, true)?;
        Ok((v, mean, var))
    }

    /// Batch norm in eval mode: normalizes with the provided running stats.
    pub fn batch_norm_eval(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        eps: T,
    ) -> Result<Value> {
        self.batch_norm_with(x, gamma, beta, running_mean, running_var, eps, false)
    }

    fn batch_norm_with(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
        batch_stats: bool,
    ) -> Result<Value> {
        let s = self.shape(x).to_vec();
        let c = *s.first().ok_or_else(|| NnError::shape("batch_norm", "rank-0 input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.shape() != [c] || var.shape() != [c] {
            return Err(NnError::shape(
                "batch_norm",
                format!("channel axis {} vs affine {:?}/{:?}", c, self.shape(gamma), self.shape(beta)),
            ));
        }
        let plane = self.values[x.0].numel() / c;
        let g = self.values[gamma.0].data().to_vec();
        let bta = self.values[beta.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let inv_std = T::one() / (var.data()[ch] + eps).sqrt();
            let m = mean.data()[ch];
            for v in chunk.iter_mut() {
                *v = (*v - m) * inv_std * g[ch] + bta[ch];
            }
        }
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(out, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps, mean, var, batch_stats }, needs))
    }

    /// 2-D convolution: `x [Cin, H, W]`, `w [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Value, w: Value, b: Option<Value>, stride: usize, pad: usize) -> Result<Value> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(NnError::shape(
                "conv2d",
                format!("input {:?} vs weight {:?} (in-channel axes must match)", sx, sw),
            ));
        }
        let oh = kernels::conv_out_dim(sx[1], sw[2], stride, pad);
        let ow = kernels::conv_out_dim(sx[2], sw[3], stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(NnError::shape("conv2d", format!("kernel {:?} larger than padded input {:?}", &sw[2..], &sx[1..])));
        };
        let dims = ConvDims {
            in_ch: sx[0],
            out_ch: sw[0],
            spatial_in: [1, sx[1], sx[2]],
            spatial_out: [1, oh, ow],
            kernel: [1, sw[2], sw[3]],
            stride,
            pad: [0, pad, pad],
        };
        self.conv_common("conv2d", x, w, b, dims, &[sw[0], oh, ow])
    }

    /// 3-D convolution: `x [Cin, D, H, W]`, `w [Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Value, w: Value, b: Option<Value>, stride: usize, pad: usize) -> Result<Value> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 || sx[0] != sw[1] {
            return Err(NnError::shape(
                "conv3d",
                format!("input {:?} vs weight {:?} (in-channel axes must match)", sx, sw),
            ));
        }
        let od = kernels::conv_out_dim(sx[1], sw[2], stride, pad);
        let oh = kernels::conv_out_dim(sx[2], sw[3], stride, pad);
        let ow = kernels::conv_out_dim(sx[3], sw[4], stride, pad);
        let (Some(od), Some(oh), Some(ow)) = (od, oh, ow) else {
            return Err(NnError::shape("conv3d", format!("kernel {:?} larger than padded input {:?}", &sw[2..], &sx[1..])));
        };
        let dims = ConvDims {
            in_ch: sx[0],
            out_ch: sw[0],
            spatial_in: [sx[1], sx[2], sx[3]],
            spatial_out: [od, oh, ow],
            kernel: [sw[2], sw[3], sw[4]],
            stride,
            pad: [pad, pad, pad],
        };
        self.conv_common("conv3d", x, w, b, dims, &[sw[0], od, oh, ow])
    }

    fn conv_common(
        &mut self,
        op: &'static str,
        x: Value,
        w: Value,
        b: Option<Value>,
        dims: ConvDims,
        out_shape: &[usize],
    ) -> Result<Value> {
        if let Some(bias) = b {
            if self.shape(bias) != [dims.out_ch] {
                return Err(NnError::shape(op, format!("bias {:?} vs out channels {}", self.shape(bias), dims.out_ch)));
            }
        }
        let data = kernels::conv3d_forward(
            self.values[x.0].data(),
            self.values[w.0].data(),
            b.map(|bv| self.values[bv.0].data()),
            &dims,
        );
        let mut ids = vec![x.0, w.0];
        if let Some(bias) = b {
            ids.push(bias.0);
        }
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::new(out_shape, data), Op::Conv { x: x.0, w: w.0, b: b.map(|v| v.0), dims }, needs))
    }

    /// Nearest-neighbor upsampling of `[C, D, H, W]` by an integer factor.
    pub fn upsample3d_nearest(&mut self, a: Value, factor: usize) -> Result<Value> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(NnError::shape("upsample3d", format!("input {:?}, factor {}", s, factor)));
        }
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let src = self.values[a.0].data();
        let mut data = vec![T::zero(); c * od * oh * ow];
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((ch * d + z / factor) * h + y / factor) * w;
                    let drow = ((ch * od + z) * oh + y) * ow;
                    for x in 0..ow {
                        data[drow + x] = src[srow + x / factor];
                    }
                }
            }
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor::new(&[c, od, oh, ow], data), Op::Upsample3d { a: a.0, factor }, needs))
    }

    // ---- backward ----

    /// Accumulates gradients of a scalar `loss` into every reachable node.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(NnError::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let values = &self.values;
        let needs = &self.needs_grad;
        let acc = |grads: &mut [Option<Tensor<T>>], idx: usize, delta: Tensor<T>| {
            match &mut grads[idx] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs[*a] {
                    acc(grads, *a, g.clone());
                }
                if needs[*b] {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs[*a] {
                    acc(grads, *a, g.clone());
                }
                if needs[*b] {
                    acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs[*a] {
                    acc(grads, *a, g.zip_map(&values[*b], |gv, bv| gv * bv));
                }
                if needs[*b] {
                    acc(grads, *b, g.zip_map(&values[*a], |gv, av| gv * av));
                }
            }
            Op::AddBias { a, bias } => {
                if needs[*a] {
                    acc(grads, *a, g.clone());
                }
                if needs[*bias] {
                    let n = values[*bias].numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d = *d + gv;
                        }
                    }
                    acc(grads, *bias, Tensor::new(&[n], db));
                }
            }
            Op::Scale { a, k } => {
                if needs[*a] {
                    let k = *k;
                    acc(grads, *a, g.map(|v| v * k));
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if needs[*a] {
                    // da = g · bᵀ : [batch, m, n] × [batch, n, k]
                    let data = kernels::bmm(g.data(), values[*b].data(), batch, m, n, k, false, true);
                    acc(grads, *a, Tensor::new(values[*a].shape(), data));
                }
                if needs[*b] {
                    // db = aᵀ · g : [batch, k, m] × [batch, m, n]
                    let data = kernels::bmm(values[*a].data(), g.data(), batch, k, m, n, true, false);
                    acc(grads, *b, Tensor::new(values[*b].shape(), data));
                }
            }
            Op::Permute { a, axes } => {
                if needs[*a] {
                    let mut inv = vec![0usize; axes.len()];
                    for (pos, &ax) in axes.iter().enumerate() {
                        inv[ax] = pos;
                    }
                    acc(grads, *a, permute_tensor(g, &inv));
                }
            }
            Op::Reshape { a } => {
                if needs[*a] {
                    acc(grads, *a, g.clone().reshaped(values[*a].shape()));
                }
            }
            Op::Concat { axis, parts } => {
                let out_shape = values[i].shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                for p in parts {
                    let pa = values[*p].shape()[*axis];
                    if needs[*p] {
                        let mut part = Tensor::zeros(values[*p].shape());
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            part.data_mut()[o * pa * inner..(o + 1) * pa * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + pa * inner]);
                        }
                        acc(grads, *p, part);
                    }
                    offset += pa;
                }
            }
            Op::RowMix { a, plan } => {
                if needs[*a] {
                    let width = values[*a].shape()[1];
                    let mut da = Tensor::zeros(values[*a].shape());
                    for (r, entries) in plan.rows.iter().enumerate() {
                        let grow = &g.data()[r * width..(r + 1) * width];
                        for &(j, w) in entries {
                            let dst = &mut da.data_mut()[j as usize * width..(j as usize + 1) * width];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d = *d + w * gv;
                            }
                        }
                    }
                    acc(grads, *a, da);
                }
            }
            Op::Relu(a) => {
                if needs[*a] {
                    acc(grads, *a, g.zip_map(&values[*a], |gv, x| if x > T::zero() { gv } else { T::zero() }));
                }
            }
            Op::Gelu(a) => {
                if needs[*a] {
                    acc(grads, *a, g.zip_map(&values[*a], |gv, x| gv * gelu_bwd(x)));
                }
            }
            Op::Sigmoid(a) => {
                if needs[*a] {
                    acc(grads, *a, g.zip_map(&values[i], |gv, y| gv * y * (T::one() - y)));
                }
            }
            Op::Sin(a) => {
                if needs[*a] {
                    acc(grads, *a, g.zip_map(&values[*a], |gv, x| gv * x.cos()));
                }
            }
            Op::Cos(a) => {
                if needs[*a] {
                    acc(grads, *a, g.zip_map(&values[*a], |gv, x| -(gv * x.sin())));
                }
            }
            Op::Softmax(a) => {
                if needs[*a] {
                    let y = &values[i];
                    let n = *y.shape().last().unwrap();
                    let mut da = Tensor::zeros(y.shape());
                    for ((drow, yrow), grow) in
                        da.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n))
                    {
                        let mut dot = T::zero();
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            dot = dot + yv * gv;
                        }
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d = (gv - dot) * yv;
                        }
                    }
                    acc(grads, *a, da);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xs = &values[*x];
                let n = *xs.shape().last().unwrap();
                let rows = xs.numel() / n;
                let gdat = values[*gamma].data();
                let inv_n = T::from_f64(1.0 / n as f64);
                let mut dx = needs[*x].then(|| Tensor::zeros(xs.shape()));
                let mut dgamma = needs[*gamma].then(|| vec![T::zero(); n]);
                let mut dbeta = needs[*beta].then(|| vec![T::zero(); n]);
                for r in 0..rows {
                    let xrow = &xs.data()[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let mut mean = T::zero();
                    for &v in xrow {
                        mean = mean + v;
                    }
                    mean = mean * inv_n;
                    let mut var = T::zero();
                    for &v in xrow {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_n;
                    let inv_std = T::one() / (var + *eps).sqrt();
                    // x̂ and the two row means needed by the dx formula
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let dxhat = grow[j] * gdat[j];
                        mean_dxhat = mean_dxhat + dxhat;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                        if let Some(dg) = dgamma.as_mut() {
                            dg[j] = dg[j] + grow[j] * xhat;
                        }
                        if let Some(db) = dbeta.as_mut() {
                            db[j] = db[j] + grow[j];
                        }
                    }
                    mean_dxhat = mean_dxhat * inv_n;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                    if let Some(dx) = dx.as_mut() {
                        let drow = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let dxhat = grow[j] * gdat[j];
                            drow[j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dg) = dgamma {
                    acc(grads, *gamma, Tensor::new(&[n], dg));
                }
                if let Some(db) = dbeta {
                    acc(grads, *beta, Tensor::new(&[n], db));
                }
            }
            Op::BatchNorm { x, gamma, beta, eps, mean, var, batch_stats } => {
                let xs = &values[*x];
                let c = xs.shape()[0];
                let plane = xs.numel() / c;
                let inv_plane = T::from_f64(1.0 / plane as f64);
                let gdat = values[*gamma].data();
                let mut dx = needs[*x].then(|| Tensor::zeros(xs.shape()));
                let mut dgamma = needs[*gamma].then(|| vec![T::zero(); c]);
                let mut dbeta = needs[*beta].then(|| vec![T::zero(); c]);
                for ch in 0..c {
                    let xch = &xs.data()[ch * plane..(ch + 1) * plane];
                    let gch = &g.data()[ch * plane..(ch + 1) * plane];
                    let m = mean.data()[ch];
                    let inv_std = T::one() / (var.data()[ch] + *eps).sqrt();
                    let mut sum_g = T::zero();
                    let mut sum_g_xhat = T::zero();
                    for (&xv, &gv) in xch.iter().zip(gch) {
                        sum_g = sum_g + gv;
                        sum_g_xhat = sum_g_xhat + gv * (xv - m) * inv_std;
                    }
                    if let Some(dg) = dgamma.as_mut() {
                        dg[ch] = sum_g_xhat;
                    }
                    if let Some(db) = dbeta.as_mut() {
                        db[ch] = sum_g;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dch = &mut dx.data_mut()[ch * plane..(ch + 1) * plane];
                        let gamma_c = gdat[ch];
                        if *batch_stats {
                            let mean_dxhat = sum_g * gamma_c * inv_plane;
                            let mean_dxhat_xhat = sum_g_xhat * gamma_c * inv_plane;
                            for (j, d) in dch.iter_mut().enumerate() {
                                let xhat = (xch[j] - m) * inv_std;
                                let dxhat = gch[j] * gamma_c;
                                *d = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
                            }
                        } else {
                            for (j, d) in dch.iter_mut().enumerate() {
                                *d = gch[j] * gamma_c * inv_std;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dg) = dgamma {
                    acc(grads, *gamma, Tensor::new(&[c], dg));
                }
                if let Some(db) = dbeta {
                    acc(grads, *beta, Tensor::new(&[c], db));
                }
            }
            Op::Conv { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv3d_backward(
                    values[*x].data(),
                    values[*w].data(),
                    g.data(),
                    b.is_some(),
                    dims,
                );
                if needs[*x] {
                    acc(grads, *x, Tensor::new(values[*x].shape(), dx));
                }
                if needs[*w] {
                    acc(grads, *w, Tensor::new(values[*w].shape(), dw));
                }
                if let (Some(bias), Some(db)) = (b, db) {
                    if needs[*bias] {
                        acc(grads, *bias, Tensor::new(values[*bias].shape(), db));
                    }
                }
            }
            Op::Upsample3d { a, factor } => {
                if needs[*a] {
                    let s = values[*a].shape();
                    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
                    let f = *factor;
                    let (od, oh, ow) = (d * f, h * f, w * f);
                    let mut da = Tensor::zeros(s);
                    {
                        let dd = da.data_mut();
                        for ch in 0..c {
                            for z in 0..od {
                                for y in 0..oh {
                                    let drow = ((ch * d + z / f) * h + y / f) * w;
                                    let srow = ((ch * od + z) * oh + y) * ow;
                                    for xx in 0..ow {
                                        dd[drow + xx / f] = dd[drow + xx / f] + g.data()[srow + xx];
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *a, da);
                }
            }
            Op::Sum(a) => {
                if needs[*a] {
                    let gv = g.item();
                    acc(grads, *a, Tensor::full(values[*a].shape(), gv));
                }
            }
            Op::Mean(a) => {
                if needs[*a] {
                    let gv = g.item() / T::from_f64(values[*a].numel() as f64);
                    acc(grads, *a, Tensor::full(values[*a].shape(), gv));
                }
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::shape(op, format!("lhs {:?} vs rhs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }
}

fn channel_stats<T: Element>(x: &Tensor<T>, c: usize) -> (Tensor<T>, Tensor<T>) {
    let plane = x.numel() / c;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let chunk = &x.data()[ch * plane..(ch + 1) * plane];
        let mut m = T::zero();
        for &v in chunk {
            m = m + v;
        }
        m = m * inv;
        let mut s = T::zero();
        for &v in chunk {
            let d = v - m;
            s = s + d * d;
        }
        mean[ch] = m;
        var[ch] = s * inv;
    }
    (Tensor::new(&[c], mean), Tensor::new(&[c], var))
}

fn permute_tensor<T: Element>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut data = vec![T::zero(); t.numel()];
    let rank = axes.len();
    for (out_idx, slot) in data.iter_mut().enumerate() {
        let mut rem = out_idx;
        let mut src = 0usize;
        for d in 0..rank {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            src += coord * in_strides[axes[d]];
        }
        *slot = t.data()[src];
    }
    Tensor::new(&out_shape, data)
}

fn gelu_fwd<T: Element>(x: T) -> T {
    // tanh approximation of GELU
    let c0 = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let c1 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Element>(x: T) -> T {
    let c0 = T::from_f64(0.7978845608028654);
    let c1 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (T::one() + three * c1 * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn sigmoid_fwd<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec())
    }

    #[test]
    fn add_and_backward() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        let total = g.sum(s).unwrap();
        assert_eq!(g.value(total).item(), 10.0);
        g.backward(total).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_known_values() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        // dA = 1 · Bᵀ summed: each row of dA = column sums of B rows
        assert_eq!(g.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[0.1, -2.0, 3.0, 10.0, 10.0, 10.0]));
        let s = g.softmax(a).unwrap();
        for row in g.value(s).data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2]));
        let b = g.input(Tensor::zeros(&[3]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("[2]"));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[2], &[3.0, 4.0]));
        let s = g.mul(a, b).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
    }

    #[test]
    fn concat_and_split_gradient() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[1, 2], &[3.0, 4.0]));
        let c = g.concat(0, &[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let m = g.mul(c, w).unwrap();
        let l = g.sum(m).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn row_mix_forward_backward() {
        let mut g = Graph::new();
        let a = g.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let plan = Arc::new(RowMixPlan {
            input_rows: 3,
            rows: vec![vec![(0, 0.5), (2, 0.5)], vec![], vec![(1, 1.0)]],
        });
        let m = g.row_mix(a, plan).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let l = g.sum(m).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.5, 0.5, 1.0, 1.0, 0.5, 0.5]);
    }
}
