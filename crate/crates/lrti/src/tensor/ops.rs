//! Differentiable primitives: eager forward kernels plus their
//! vector-Jacobian products for the reverse sweep.
//!
//! Every public op validates shapes (errors name both offending shapes),
//! computes its output eagerly, and appends a tape node only when a
//! recording is active *and* at least one input carries gradient ancestry.
//! Ops over pure constants therefore never grow the tape.

use std::sync::Arc;

use super::tape::{Node, NodeId, Op};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Charbonnier smoothing constant: loss of identical inputs.
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Epsilon inside layer normalisation's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn live<E: Elem>(t: &Tensor<E>, epoch: u64) -> bool {
    if t.requires_grad() {
        return true;
    }
    matches!(t.node_ref(), Some(r) if r.epoch == epoch)
}

fn record<E: Elem>(
    inputs: &[&Tensor<E>],
    out: &mut Tensor<E>,
    alias: bool,
    build: impl FnOnce(&[NodeId]) -> Op<E>,
) {
    E::with_tape(|slot| {
        if let Some(tape) = slot.as_mut() {
            let epoch = tape.epoch();
            if inputs.iter().any(|t| live(t, epoch)) {
                let ids: Vec<NodeId> = inputs.iter().map(|t| tape.ensure_input(t)).collect();
                let id = tape.push(build(&ids), out.data_arc(), out.shape().to_vec(), alias);
                out.set_node(super::TapeRef { epoch, id });
            }
        }
    });
}

fn check_same_shape<E: Elem>(what: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<E: Elem> Tensor<E> {
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("add", self, rhs)?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let mut out = Tensor::new_internal(self.shape().to_vec(), Arc::new(data));
        record(&[self, rhs], &mut out, false, |ids| Op::Add {
            a: ids[0],
            b: ids[1],
        });
        Ok(out)
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("sub", self, rhs)?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let mut out = Tensor::new_internal(self.shape().to_vec(), Arc::new(data));
        record(&[self, rhs], &mut out, false, |ids| Op::Sub {
            a: ids[0],
            b: ids[1],
        });
        Ok(out)
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("mul", self, rhs)?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let mut out = Tensor::new_internal(self.shape().to_vec(), Arc::new(data));
        record(&[self, rhs], &mut out, false, |ids| Op::Mul {
            a: ids[0],
            b: ids[1],
        });
        Ok(out)
    }

    /// Multiply by a scalar constant.
    pub fn scale(&self, c: f64) -> Tensor<E> {
        let c = E::from64(c);
        let data: Vec<E> = self.data().iter().map(|&a| a * c).collect();
        let mut out = Tensor::new_internal(self.shape().to_vec(), Arc::new(data));
        record(&[self], &mut out, false, |ids| Op::Scale { x: ids[0], c });
        out
    }

    /// Batched matrix product. Both operands must have rank >= 2; leading
    /// (batch) axes must match exactly, except that a rank-2 right operand
    /// broadcasts across the left operand's batch.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (ashape, bshape) = (self.shape(), rhs.shape());
        let (ra, rb) = (ashape.len(), bshape.len());
        if ra < 2 || rb < 2 {
            return Err(Error::Dimension(format!(
                "matmul requires rank >= 2 operands, got {ashape:?} and {bshape:?}"
            )));
        }
        let (m, k) = (ashape[ra - 2], ashape[ra - 1]);
        let (k2, n) = (bshape[rb - 2], bshape[rb - 1]);
        let b_batched = rb > 2;
        let batch_ok = if b_batched {
            ashape[..ra - 2] == bshape[..rb - 2]
        } else {
            true
        };
        if k != k2 || !batch_ok {
            return Err(Error::Dimension(format!(
                "matmul: {ashape:?} incompatible with {bshape:?}"
            )));
        }
        let batch: usize = ashape[..ra - 2].iter().product();
        let mut out_shape = ashape[..ra - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let mut data = vec![E::zero(); batch * m * n];
        matmul_kernel(
            self.data(),
            rhs.data(),
            &mut data,
            batch,
            m,
            k,
            n,
            b_batched,
        );
        let mut out = Tensor::new_internal(out_shape, Arc::new(data));
        record(&[self, rhs], &mut out, false, |ids| Op::Matmul {
            a: ids[0],
            b: ids[1],
            batch,
            m,
            k,
            n,
            b_batched,
        });
        Ok(out)
    }

    /// 3x3 convolution, stride 1, zero padding 1: `self` is `[Cin, H, W]`,
    /// the kernel `[Cout, Cin, 3, 3]`, the output `[Cout, H, W]`.
    pub fn conv2d(&self, kernel: &Tensor<E>) -> Result<Tensor<E>> {
        let xs = self.shape();
        let ws = kernel.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || xs[0] != ws[1] {
            return Err(Error::Dimension(format!(
                "conv2d expects input [Cin, H, W] with kernel [Cout, Cin, 3, 3]; \
                 got {xs:?} and {ws:?}"
            )));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let mut data = vec![E::zero(); cout * h * w];
        conv2d_kernel(self.data(), kernel.data(), &mut data, cin, cout, h, w);
        let mut out = Tensor::new_internal(vec![cout, h, w], Arc::new(data));
        record(&[self, kernel], &mut out, false, |ids| Op::Conv2d3x3 {
            x: ids[0],
            w: ids[1],
        });
        Ok(out)
    }

    /// Squared rectifier: `max(x, 0)^2`.
    pub fn relu2(&self) -> Tensor<E> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&v| {
                let r = v.max(E::zero());
                r * r
            })
            .collect();
        let mut out = Tensor::new_internal(self.shape().to_vec(), Arc::new(data));
        record(&[self], &mut out, false, |ids| Op::Relu2 { x: ids[0] });
        out
    }

    /// Softmax along `axis`, computed with the max subtracted for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape().len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = lane_split(self.shape(), axis);
        let x = self.data();
        let mut data = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = x[base];
                for j in 1..n {
                    let v = x[base + j * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = E::zero();
                for j in 0..n {
                    let e = (x[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    denom = denom + e;
                }
                for j in 0..n {
                    data[base + j * inner] = data[base + j * inner] / denom;
                }
            }
        }
        let mut out = Tensor::new_internal(self.shape().to_vec(), Arc::new(data));
        record(&[self], &mut out, false, |ids| Op::Softmax {
            x: ids[0],
            axis,
        });
        Ok(out)
    }

    /// Layer normalisation along `axis` with learnable per-coordinate affine
    /// parameters of shape `[extent(axis)]`.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape().len() {
            return Err(Error::Dimension(format!(
                "layer_norm axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let n = self.shape()[axis];
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::Dimension(format!(
                "layer_norm affine shapes {:?}/{:?} must be [{n}] for input {:?}",
                gamma.shape(),
                beta.shape(),
                self.shape()
            )));
        }
        let (outer, _, inner) = lane_split(self.shape(), axis);
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let eps = E::from64(LAYER_NORM_EPS);
        let inv_n = E::from64(1.0 / n as f64);
        let mut data = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mean = E::zero();
                for j in 0..n {
                    mean = mean + x[base + j * inner];
                }
                mean = mean * inv_n;
                let mut var = E::zero();
                for j in 0..n {
                    let d = x[base + j * inner] - mean;
                    var = var + d * d;
                }
                var = var * inv_n;
                let inv_std = (var + eps).sqrt().recip();
                for j in 0..n {
                    let xh = (x[base + j * inner] - mean) * inv_std;
                    data[base + j * inner] = g[j] * xh + b[j];
                }
            }
        }
        let mut out = Tensor::new_internal(self.shape().to_vec(), Arc::new(data));
        record(&[self, gamma, beta], &mut out, false, |ids| Op::LayerNorm {
            x: ids[0],
            gamma: ids[1],
            beta: ids[2],
            axis,
        });
        Ok(out)
    }

    /// Rearrange `[C*s^2, H, W]` into `[C, H*s, W*s]`, placing each group of
    /// s^2 channels as an s-by-s pixel block in raster order.
    pub fn pixel_shuffle(&self, s: usize) -> Result<Tensor<E>> {
        let xs = self.shape();
        if xs.len() != 3 || s == 0 || xs[0] % (s * s) != 0 {
            return Err(Error::Dimension(format!(
                "pixel_shuffle: shape {xs:?} incompatible with scale {s} \
                 (need rank 3 with channels divisible by {})",
                s * s
            )));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let c = c_in / (s * s);
        let (oh, ow) = (h * s, w * s);
        let mut map = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let src_c = ch * s * s + (y % s) * s + (x % s);
                    map.push(((src_c * h + y / s) * w + x / s) as i64);
                }
            }
        }
        Ok(gather_map(self, vec![c, oh, ow], map))
    }

    /// Exact inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, s: usize) -> Result<Tensor<E>> {
        let xs = self.shape();
        if xs.len() != 3 || s == 0 || xs[1] % s != 0 || xs[2] % s != 0 {
            return Err(Error::Dimension(format!(
                "pixel_unshuffle: shape {xs:?} not divisible by scale {s}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (sh, sw) = (h / s, w / s);
        let oc = c * s * s;
        let mut map = Vec::with_capacity(oc * sh * sw);
        for ch in 0..oc {
            let base_c = ch / (s * s);
            let dy = (ch % (s * s)) / s;
            let dx = ch % s;
            for y in 0..sh {
                for x in 0..sw {
                    map.push(((base_c * h + y * s + dy) * w + x * s + dx) as i64);
                }
            }
        }
        Ok(gather_map(self, vec![oc, sh, sw], map))
    }

    /// Charbonnier loss: mean over elements of `sqrt(diff^2 + eps^2)` with
    /// eps = 1e-3. Returns a scalar.
    pub fn charbonnier_loss(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("charbonnier_loss", self, target)?;
        let eps2 = E::from64(CHARBONNIER_EPS * CHARBONNIER_EPS);
        let mut acc = E::zero();
        for (&p, &t) in self.data().iter().zip(target.data()) {
            let d = p - t;
            acc = acc + (d * d + eps2).sqrt();
        }
        let v = acc * E::from64(1.0 / self.numel() as f64);
        let mut out = Tensor::new_internal(Vec::new(), Arc::new(vec![v]));
        record(&[self, target], &mut out, false, |ids| Op::Charbonnier {
            pred: ids[0],
            target: ids[1],
        });
        Ok(out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor<E> {
        let mut acc = E::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        let mut out = Tensor::new_internal(Vec::new(), Arc::new(vec![acc]));
        record(&[self], &mut out, false, |ids| Op::Sum { x: ids[0] });
        out
    }

    /// Reinterpret the flat buffer under a new shape with equal element
    /// count. Shares the buffer; the tape counts no new bytes for it.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} ({} elements) cannot view as {:?} ({} elements)",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        let mut out = Tensor::new_internal(shape.to_vec(), self.data_arc());
        record(&[self], &mut out, true, |ids| Op::Reshape { x: ids[0] });
        Ok(out)
    }

    /// Swap the two trailing axes.
    pub fn transpose_last(&self) -> Result<Tensor<E>> {
        let xs = self.shape();
        if xs.len() < 2 {
            return Err(Error::Dimension(format!(
                "transpose_last requires rank >= 2, got {xs:?}"
            )));
        }
        let r = xs.len();
        let (m, n) = (xs[r - 2], xs[r - 1]);
        let batch: usize = xs[..r - 2].iter().product();
        let mut out_shape = xs.to_vec();
        out_shape[r - 2] = n;
        out_shape[r - 1] = m;
        let mut map = Vec::with_capacity(self.numel());
        for b in 0..batch {
            for i in 0..n {
                for j in 0..m {
                    map.push((b * m * n + j * n + i) as i64);
                }
            }
        }
        Ok(gather_map(self, out_shape, map))
    }
}

/// Concatenate tensors along `axis`. All other extents must match.
pub fn concat<E: Elem>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::Usage("concat of zero tensors".into()));
    }
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(Error::Dimension(format!(
            "concat axis {axis} out of range for shape {first:?}"
        )));
    }
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first.iter())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Dimension(format!(
                "concat: shape {s:?} incompatible with {first:?} along axis {axis}"
            )));
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = axis_total;

    let inner: usize = first[axis + 1..].iter().product();
    let outer: usize = first[..axis].iter().product();
    let mut data = vec![E::zero(); out_shape.iter().product()];
    let row_out = axis_total * inner;
    for o in 0..outer {
        let mut off = 0;
        for p in parts {
            let len = p.shape()[axis] * inner;
            let src = &p.data()[o * len..(o + 1) * len];
            data[o * row_out + off..o * row_out + off + len].copy_from_slice(src);
            off += len;
        }
    }
    let mut out = Tensor::new_internal(out_shape, Arc::new(data));
    record(parts, &mut out, false, |ids| Op::Concat {
        parts: ids.to_vec(),
        axis,
    });
    Ok(out)
}

/// Generic differentiable gather: `out[i] = map[i] >= 0 ? x[map[i]] : 0`.
/// The VJP is the matching scatter-add, so repeated indices accumulate.
/// Used for every pure data-movement op (pixel shuffle, windowing, padding,
/// patch alignment, bias-table expansion).
pub(crate) fn gather_map<E: Elem>(x: &Tensor<E>, out_shape: Vec<usize>, map: Vec<i64>) -> Tensor<E> {
    debug_assert_eq!(out_shape.iter().product::<usize>(), map.len());
    let src = x.data();
    let data: Vec<E> = map
        .iter()
        .map(|&i| if i >= 0 { src[i as usize] } else { E::zero() })
        .collect();
    let map = Arc::new(map);
    let mut out = Tensor::new_internal(out_shape, Arc::new(data));
    record(&[x], &mut out, false, |ids| Op::Gather {
        x: ids[0],
        map: Arc::clone(&map),
    });
    out
}

fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

#[allow(clippy::too_many_arguments)]
fn matmul_kernel<E: Elem>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = if b_batched { bi * k * n } else { 0 };
        let o_off = bi * m * n;
        for i in 0..m {
            let a_row = &a[a_off + i * k..a_off + (i + 1) * k];
            let o_row = &mut out[o_off + i * n..o_off + (i + 1) * n];
            for (kk, &aik) in a_row.iter().enumerate() {
                if aik == E::zero() {
                    continue;
                }
                let b_row = &b[b_off + kk * n..b_off + (kk + 1) * n];
                for j in 0..n {
                    o_row[j] = o_row[j] + aik * b_row[j];
                }
            }
        }
    }
}

fn conv2d_kernel<E: Elem>(
    x: &[E],
    w: &[E],
    out: &mut [E],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) {
    for co in 0..cout {
        for ci in 0..cin {
            let xo = ci * h * wd;
            let wo = (co * cin + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wk = w[wo + ky * 3 + kx];
                    if wk == E::zero() {
                        continue;
                    }
                    // Valid output rows/cols for this kernel offset.
                    let y0 = 1usize.saturating_sub(ky);
                    let y1 = (h + 1 - ky).min(h);
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (wd + 1 - kx).min(wd);
                    for y in y0..y1 {
                        let src = xo + (y + ky - 1) * wd;
                        let dst = co * h * wd + y * wd;
                        for x_ in x0..x1 {
                            out[dst + x_] = out[dst + x_] + wk * x[src + x_ + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate `f`'s contributions into node `id`'s gradient buffer,
/// allocating it on first touch.
fn acc<E: Elem>(
    grads: &mut [Option<Vec<E>>],
    nodes: &[Node<E>],
    id: NodeId,
    f: impl FnOnce(&mut [E]),
) {
    let slot = &mut grads[id];
    let buf = slot.get_or_insert_with(|| vec![E::zero(); nodes[id].out.len()]);
    f(buf);
}

/// Reverse step for node `id`: distribute its output gradient `g` onto its
/// inputs' gradient buffers.
pub(crate) fn backward_step<E: Elem>(
    nodes: &[Node<E>],
    id: NodeId,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    match &nodes[id].op {
        Op::Leaf { .. } => unreachable!("leaves handled by the caller"),
        Op::Add { a, b } => {
            acc(grads, nodes, *a, |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            });
            acc(grads, nodes, *b, |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            });
        }
        Op::Sub { a, b } => {
            acc(grads, nodes, *a, |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            });
            acc(grads, nodes, *b, |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d = *d - gv;
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].out, &nodes[*b].out);
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * bv[i];
                }
            });
            acc(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * av[i];
                }
            });
        }
        Op::Scale { x, c } => {
            let c = *c;
            acc(grads, nodes, *x, |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d = *d + gv * c;
                }
            });
        }
        Op::Matmul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_batched,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (av, bv) = (&nodes[*a].out, &nodes[*b].out);
            // dA[i, kk] = sum_j g[i, j] * b[kk, j]
            acc(grads, nodes, *a, |da| {
                for bi in 0..batch {
                    let g_off = bi * m * n;
                    let b_off = if *b_batched { bi * k * n } else { 0 };
                    let a_off = bi * m * k;
                    for i in 0..m {
                        let g_row = &g[g_off + i * n..g_off + (i + 1) * n];
                        for kk in 0..k {
                            let b_row = &bv[b_off + kk * n..b_off + (kk + 1) * n];
                            let mut s = E::zero();
                            for j in 0..n {
                                s = s + g_row[j] * b_row[j];
                            }
                            da[a_off + i * k + kk] = da[a_off + i * k + kk] + s;
                        }
                    }
                }
            });
            // dB[kk, j] = sum_i a[i, kk] * g[i, j], summed over the batch
            // when b is broadcast.
            acc(grads, nodes, *b, |db| {
                for bi in 0..batch {
                    let g_off = bi * m * n;
                    let b_off = if *b_batched { bi * k * n } else { 0 };
                    let a_off = bi * m * k;
                    for i in 0..m {
                        let g_row = &g[g_off + i * n..g_off + (i + 1) * n];
                        for kk in 0..k {
                            let aik = av[a_off + i * k + kk];
                            if aik == E::zero() {
                                continue;
                            }
                            let db_row = &mut db[b_off + kk * n..b_off + (kk + 1) * n];
                            for j in 0..n {
                                db_row[j] = db_row[j] + aik * g_row[j];
                            }
                        }
                    }
                }
            });
        }
        Op::Conv2d3x3 { x, w } => {
            let (cin, h, wd) = {
                let s = &nodes[*x].shape;
                (s[0], s[1], s[2])
            };
            let cout = nodes[*w].shape[0];
            let (xv, wv) = (&nodes[*x].out, &nodes[*w].out);
            acc(grads, nodes, *x, |dx| {
                for co in 0..cout {
                    for ci in 0..cin {
                        let wo = (co * cin + ci) * 9;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let wk = wv[wo + ky * 3 + kx];
                                if wk == E::zero() {
                                    continue;
                                }
                                let y0 = 1usize.saturating_sub(ky);
                                let y1 = (h + 1 - ky).min(h);
                                let x0 = 1usize.saturating_sub(kx);
                                let x1 = (wd + 1 - kx).min(wd);
                                for y in y0..y1 {
                                    let src = ci * h * wd + (y + ky - 1) * wd;
                                    let go = co * h * wd + y * wd;
                                    for xx in x0..x1 {
                                        dx[src + xx + kx - 1] =
                                            dx[src + xx + kx - 1] + wk * g[go + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            acc(grads, nodes, *w, |dw| {
                for co in 0..cout {
                    for ci in 0..cin {
                        let wo = (co * cin + ci) * 9;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let y0 = 1usize.saturating_sub(ky);
                                let y1 = (h + 1 - ky).min(h);
                                let x0 = 1usize.saturating_sub(kx);
                                let x1 = (wd + 1 - kx).min(wd);
                                let mut s = E::zero();
                                for y in y0..y1 {
                                    let src = ci * h * wd + (y + ky - 1) * wd;
                                    let go = co * h * wd + y * wd;
                                    for xx in x0..x1 {
                                        s = s + g[go + xx] * xv[src + xx + kx - 1];
                                    }
                                }
                                dw[wo + ky * 3 + kx] = dw[wo + ky * 3 + kx] + s;
                            }
                        }
                    }
                }
            });
        }
        Op::Relu2 { x } => {
            let xv = &nodes[*x].out;
            acc(grads, nodes, *x, |d| {
                let two = E::from64(2.0);
                for i in 0..d.len() {
                    let r = xv[i].max(E::zero());
                    d[i] = d[i] + g[i] * two * r;
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = &nodes[id].out;
            let (outer, n, inner) = lane_split(&nodes[id].shape, *axis);
            acc(grads, nodes, *x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = E::zero();
                        for j in 0..n {
                            let p = base + j * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for j in 0..n {
                            let p = base + j * inner;
                            d[p] = d[p] + y[p] * (g[p] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
        } => {
            let xv = &nodes[*x].out;
            let gv = &nodes[*gamma].out;
            let (outer, n, inner) = lane_split(&nodes[*x].shape, *axis);
            let eps = E::from64(LAYER_NORM_EPS);
            let inv_n = E::from64(1.0 / n as f64);
            let mut xhat = vec![E::zero(); n];
            let mut dxhat = vec![E::zero(); n];
            // Three destinations share per-lane statistics, so recompute the
            // lane once and write all of them inside a single pass.
            let mut dx_buf = vec![E::zero(); xv.len()];
            let mut dgamma = vec![E::zero(); n];
            let mut dbeta = vec![E::zero(); n];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut mean = E::zero();
                    for j in 0..n {
                        mean = mean + xv[base + j * inner];
                    }
                    mean = mean * inv_n;
                    let mut var = E::zero();
                    for j in 0..n {
                        let d = xv[base + j * inner] - mean;
                        var = var + d * d;
                    }
                    var = var * inv_n;
                    let inv_std = (var + eps).sqrt().recip();
                    let mut mean_dxh = E::zero();
                    let mut mean_dxh_xh = E::zero();
                    for j in 0..n {
                        let p = base + j * inner;
                        let xh = (xv[p] - mean) * inv_std;
                        xhat[j] = xh;
                        let dh = g[p] * gv[j];
                        dxhat[j] = dh;
                        dgamma[j] = dgamma[j] + g[p] * xh;
                        dbeta[j] = dbeta[j] + g[p];
                        mean_dxh = mean_dxh + dh;
                        mean_dxh_xh = mean_dxh_xh + dh * xh;
                    }
                    mean_dxh = mean_dxh * inv_n;
                    mean_dxh_xh = mean_dxh_xh * inv_n;
                    for j in 0..n {
                        let p = base + j * inner;
                        dx_buf[p] = inv_std * (dxhat[j] - mean_dxh - xhat[j] * mean_dxh_xh);
                    }
                }
            }
            acc(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + dx_buf[i];
                }
            });
            acc(grads, nodes, *gamma, |d| {
                for j in 0..n {
                    d[j] = d[j] + dgamma[j];
                }
            });
            acc(grads, nodes, *beta, |d| {
                for j in 0..n {
                    d[j] = d[j] + dbeta[j];
                }
            });
        }
        Op::Charbonnier { pred, target } => {
            let (pv, tv) = (&nodes[*pred].out, &nodes[*target].out);
            let g0 = g[0];
            let eps2 = E::from64(CHARBONNIER_EPS * CHARBONNIER_EPS);
            let inv_n = E::from64(1.0 / pv.len() as f64);
            // d loss / d pred_i = diff_i / (n * sqrt(diff_i^2 + eps^2))
            acc(grads, nodes, *pred, |d| {
                for i in 0..d.len() {
                    let diff = pv[i] - tv[i];
                    d[i] = d[i] + g0 * inv_n * diff / (diff * diff + eps2).sqrt();
                }
            });
            acc(grads, nodes, *target, |d| {
                for i in 0..d.len() {
                    let diff = pv[i] - tv[i];
                    d[i] = d[i] - g0 * inv_n * diff / (diff * diff + eps2).sqrt();
                }
            });
        }
        Op::Sum { x } => {
            let g0 = g[0];
            acc(grads, nodes, *x, |d| {
                for v in d.iter_mut() {
                    *v = *v + g0;
                }
            });
        }
        Op::Gather { x, map } => {
            acc(grads, nodes, *x, |d| {
                for (i, &src) in map.iter().enumerate() {
                    if src >= 0 {
                        d[src as usize] = d[src as usize] + g[i];
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let out_shape = &nodes[id].shape;
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let row_out = out_shape[*axis] * inner;
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis] * inner;
                acc(grads, nodes, p, |d| {
                    for o in 0..outer {
                        let src = &g[o * row_out + off..o * row_out + off + len];
                        let dst = &mut d[o * len..(o + 1) * len];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv = *dv + sv;
                        }
                    }
                });
                off += len;
            }
        }
        Op::Reshape { x } => {
            acc(grads, nodes, *x, |d| {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = *dv + gv;
                }
            });
        }
    }
}
