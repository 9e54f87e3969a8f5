use super::{check_same_shape, gemm_nn, gemm_nt, gemm_tn, record_branch, Tensor};
use crate::error::{shape_err, Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every destination element of `src` permuted by `axes`.
fn permute_map(src_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(src_shape);
    let dst_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let dst_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n: usize = dst_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; dst_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..dst_shape.len()).rev() {
            idx[d] += 1;
            off += dst_strides[d];
            if idx[d] < dst_shape[d] {
                break;
            }
            off -= dst_strides[d] * dst_shape[d];
            idx[d] = 0;
        }
    }
    map
}

impl Tensor {
    fn zip_with(
        &self,
        other: &Tensor,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        backward: super::BackwardFn,
    ) -> Result<Tensor> {
        check_same_shape(self, other, what)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], backward))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b, Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(
            other,
            "sub",
            |a, b| a - b,
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.clone(), other.clone());
        self.zip_with(
            other,
            "mul",
            |x, y| x * y,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        )
    }

    fn map_unary(&self, f: impl Fn(f64) -> f64, backward: super::BackwardFn) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map_unary(move |v| v * s, Box::new(move |g, _| vec![Some(g.iter().map(|v| v * s).collect())]))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map_unary(move |v| v + s, Box::new(|g, _| vec![Some(g.to_vec())]))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some((index, &value)) = self.data().iter().enumerate().find(|(_, v)| v.is_nan() || **v <= 0.0) {
            return Err(Error::NonPositiveLog { index, value });
        }
        let x = self.clone();
        Ok(self
            .map_unary(f64::ln, Box::new(move |g, _| vec![Some(g.iter().zip(x.data()).map(|(g, v)| g / v).collect())])))
    }

    pub fn relu(&self) -> Tensor {
        record_branch(self.data().iter().map(|&v| v > 0.0));
        let x = self.clone();
        self.map_unary(
            |v| if v > 0.0 { v } else { 0.0 },
            Box::new(move |g, _| {
                vec![Some(g.iter().zip(x.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let x = self.clone();
        self.map_unary(
            |v| 0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh()),
            Box::new(move |g, _| {
                let d = x.data().iter().zip(g).map(|(&v, g)| {
                    let u = C * (v + 0.044715 * v * v * v);
                    let th = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * v * v);
                    g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                });
                vec![Some(d.collect())]
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Adds `b` broadcast over the leading dims; `b`'s shape must be a suffix of ours.
    pub fn add_broadcast(&self, b: &Tensor) -> Result<Tensor> {
        let (xs, bs) = (self.shape(), b.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return shape_err(format!("add_broadcast: {bs:?} is not a suffix of {xs:?}"));
        }
        let m = b.numel();
        let data = self.data().iter().enumerate().map(|(i, &v)| v + b.data()[i % m]).collect();
        Ok(Tensor::from_op(
            xs.to_vec(),
            data,
            vec![self.clone(), b.clone()],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; m];
                    for chunk in g.chunks(m) {
                        acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {axes:?} for rank {nd}"));
        }
        let map = permute_map(self.shape(), axes);
        let data = map.iter().map(|&i| self.data()[i]).collect();
        let shape = axes.iter().map(|&a| self.shape()[a]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (gv, &i) in g.iter().zip(&map) {
                    gx[i] = *gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rank = first.ndim();
        if axis >= rank {
            return shape_err(format!("concat axis {axis} out of range for rank {rank}"));
        }
        for p in parts {
            let ok = p.ndim() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return shape_err(format!("concat: {:?} vs {:?} along axis {axis}", p.shape(), first.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (&w, &need) in widths.iter().zip(needs) {
                    grads.push(need.then(|| {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gp.extend_from_slice(&g[base..base + w]);
                        }
                        gp
                    }));
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Gathers slices along axis 0; indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return shape_err(format!("index {bad} out of range for {rows} rows"));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("index_select with no indices".into()));
        }
        let inner = self.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        let n = self.numel();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (k, &i) in indices.iter().enumerate() {
                    let dst = &mut gx[i * inner..(i + 1) * inner];
                    dst.iter_mut().zip(&g[k * inner..(k + 1) * inner]).for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Batched product of `[.., m, k]` and `[.., k, n]` with identical batch dims.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        let r = a.len();
        if r < 2 || b.len() != r || a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
            return shape_err(format!("matmul: {a:?} x {b:?}"));
        }
        let (m, k, n) = (a[r - 2], a[r - 1], b[r - 1]);
        let batch: usize = a[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm_nn(
                m,
                k,
                n,
                &self.data()[i * m * k..],
                &other.data()[i * k * n..],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = a[..r - 2].to_vec();
        shape.extend([m, n]);
        let (x, y) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm_nt(m, n, k, &g[i * m * n..], &y.data()[i * k * n..], &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm_tn(k, m, n, &x.data()[i * m * k..], &g[i * m * n..], &mut gb[i * k * n..(i + 1) * k * n]);
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return shape_err(format!("linear: input {xs:?} with weight {ws:?}"));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        let rows = self.numel() / in_f;
        let mut out = vec![0.0; rows * out_f];
        gemm_nt(rows, in_f, out_f, self.data(), weight.data(), &mut out);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = out_f;
        let (x, w) = (self.clone(), weight.clone());
        let y = Tensor::from_op(
            shape,
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * in_f];
                    gemm_nn(rows, out_f, in_f, g, w.data(), &mut gx);
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; out_f * in_f];
                    gemm_tn(out_f, rows, in_f, g, x.data(), &mut gw);
                    gw
                });
                vec![gx, gw]
            }),
        );
        match bias {
            Some(b) => y.add_broadcast(b),
            None => Ok(y),
        }
    }

    pub fn softmax_last(&self) -> Tensor {
        let d = *self.shape().last().unwrap();
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return shape_err(format!("layer_norm: width {d} with gamma {:?}", gamma.shape()));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let out = xhat.iter().enumerate().map(|(i, &v)| v * gamma.data()[i % d] + beta.data()[i % d]).collect();
        let gm = gamma.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dx = 0.0;
                    let mut sum_dx_x = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                        let dxh = gr[j] * gm.data()[j];
                        sum_dx += dxh;
                        sum_dx_x += dxh * xr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gm.data()[j];
                        gx[r * d + j] = inv_std[r] * (dxh - sum_dx / d as f64 - xr[j] * sum_dx_x / d as f64);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(format!("cross_entropy: logits {s:?} with {} labels", labels.len()));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let probs = self.detach().softmax_last();
        let p = probs.data().to_vec();
        let loss = self
            .data()
            .chunks(k)
            .zip(labels)
            .map(|(row, &l)| {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - row[l]
            })
            .sum::<f64>()
            / b as f64;
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = p.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * k + l] -= 1.0;
                }
                let s = g[0] / b as f64;
                gx.iter_mut().for_each(|v| *v *= s);
                vec![Some(gx)]
            }),
        ))
    }

    /// Averages groups of `frames` consecutive rows: `[B·T, ..]` to `[B, ..]`.
    ///
    /// Each output sums its T inputs in ascending value order, so the result is
    /// bit-identical under any reordering of the frames within a clip.
    pub fn frame_mean(&self, frames: usize) -> Result<Tensor> {
        let rows = self.shape()[0];
        if frames == 0 || !rows.is_multiple_of(frames) {
            return shape_err(format!("frame_mean: {rows} rows are not a multiple of {frames} frames"));
        }
        let clips = rows / frames;
        let inner = self.numel() / rows;
        let mut out = vec![0.0; clips * inner];
        let mut buf = vec![0.0; frames];
        for c in 0..clips {
            for j in 0..inner {
                for (t, v) in buf.iter_mut().enumerate() {
                    *v = self.data()[(c * frames + t) * inner + j];
                }
                buf.sort_by(f64::total_cmp);
                out[c * inner + j] = buf.iter().sum::<f64>() / frames as f64;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = clips;
        let n = self.numel();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (r, chunk) in gx.chunks_mut(inner).enumerate() {
                    let c = r / frames;
                    for (o, gv) in chunk.iter_mut().zip(&g[c * inner..(c + 1) * inner]) {
                        *o = gv / frames as f64;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Subtracts from every entry the minimum of its group, where the leading
    /// axis is split into `groups` equal blocks. Result is non-negative.
    pub fn shift_by_group_min(&self, groups: usize) -> Result<Tensor> {
        let n = self.numel();
        if groups == 0 || !self.shape()[0].is_multiple_of(groups) {
            return shape_err(format!("shift_by_group_min: {:?} into {groups} groups", self.shape()));
        }
        let len = n / groups;
        let argmins: Vec<usize> = self
            .data()
            .chunks(len)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect();
        record_branch(argmins.iter().flat_map(|&i| (0..usize::BITS).map(move |b| i >> b & 1 == 1)));
        let out = self
            .data()
            .chunks(len)
            .zip(&argmins)
            .flat_map(|(c, &am)| {
                let m = c[am];
                c.iter().map(move |v| v - m)
            })
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = g.to_vec();
                for (gi, (chunk, &am)) in g.chunks(len).zip(&argmins).enumerate() {
                    gx[gi * len + am] -= chunk.iter().sum::<f64>();
                }
                vec![Some(gx)]
            }),
        ))
    }
}
