use super::{flops, kernels, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn need(t: &Tensor) -> bool {
    t.requires_grad()
}

/// Splits a shape into (outer, extent, inner) around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let shape = t.shape();
    let cols = *shape.last().expect("shape is never empty");
    if shape.len() < 2 && op != "softmax_rows" {
        return Err(Error::dim(op, format!("expected rank ≥ 2, got shape {shape:?}")));
    }
    Ok((t.numel() / cols, cols))
}

impl Tensor {
    /// `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner axes differ: lhs axis 1 = {k}, rhs axis 0 = {k2} ({:?} · {:?})",
                    self.shape(),
                    rhs.shape()
                ),
            ));
        }
        flops::record(2 * (m * k * n) as u64);
        let out = kernels::matmul(&self.data(), &rhs.data(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let ga = need(&a).then(|| kernels::matmul_nt(g, &b.data(), m, n, k));
                let gb = need(&b).then(|| kernels::matmul_tn(&a.data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    /// `self[m×k] · rhs[n×k]ᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_t")?;
        let (n, k2) = rhs.dims2("matmul_t")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_t",
                format!(
                    "inner axes differ: lhs axis 1 = {k}, rhs axis 1 = {k2} ({:?} · {:?}ᵀ)",
                    self.shape(),
                    rhs.shape()
                ),
            ));
        }
        flops::record(2 * (m * k * n) as u64);
        let out = kernels::matmul_nt(&self.data(), &rhs.data(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "matmul_t",
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let ga = need(&a).then(|| kernels::matmul(g, &b.data(), m, n, k));
                let gb = need(&b).then(|| kernels::matmul_tn(g, &a.data(), m, n, k));
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum. `rhs` may also be a bias of shape `[n]` or `[1, n]`
    /// broadcast over the trailing axis of `self`.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() == rhs.shape() {
            let out: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a + b).collect();
            let (a, b) = (self.clone(), rhs.clone());
            return Ok(Tensor::from_op(
                "add",
                self.shape().to_vec(),
                out,
                vec![self.clone(), rhs.clone()],
                Box::new(move |g| vec![need(&a).then(|| g.to_vec()), need(&b).then(|| g.to_vec())]),
            ));
        }
        let cols = *self.shape().last().expect("shape is never empty");
        let bias_ok = rhs.numel() == cols
            && (rhs.shape() == [cols] || rhs.shape() == [1, cols])
            && self.rank() >= 2;
        if !bias_ok {
            return Err(Error::dim(
                "add",
                format!("cannot add {:?} to {:?}", rhs.shape(), self.shape()),
            ));
        }
        let bias = rhs.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % cols])
            .collect();
        drop(bias);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let gb = need(&b).then(|| {
                    let mut acc = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (s, v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc
                });
                vec![need(&a).then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(
                "mul",
                format!("shapes differ: {:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let out: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let ga = need(&a).then(|| g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect());
                let gb = need(&b).then(|| g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let out = self.data().iter().map(|v| v * s).collect();
        Ok(Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * s).collect())]),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let out = kernels::transpose(&self.data(), r, c);
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(kernels::transpose(g, c, r))]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Concatenates tensors of equal rank along `axis`; all other extents
    /// must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no tensors to concatenate"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("shape {:?} incompatible with {:?} along axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = around_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &e) in datas.iter().zip(&extents) {
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        drop(datas);
        let flags: Vec<bool> = parts.iter().map(need).collect();
        Ok(Tensor::from_op(
            "concat",
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Option<Vec<f64>>> = flags
                    .iter()
                    .zip(&extents)
                    .map(|(f, e)| f.then(|| Vec::with_capacity(outer * e * inner)))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gr, &e) in grads.iter_mut().zip(&extents) {
                        let span = e * inner;
                        if let Some(gr) = gr {
                            gr.extend_from_slice(&g[offset..offset + span]);
                        }
                        offset += span;
                    }
                }
                grads
            }),
        ))
    }

    /// Selects `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim("slice", format!("axis {axis} out of range for shape {:?}", self.shape())));
        }
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} outside axis {axis} of extent {extent}", start + len),
            ));
        }
        let (outer, _, inner) = around_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            "slice",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut full = vec![0.0; total];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    full[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(full)]
            }),
        ))
    }

    /// Gathers rows of an embedding table `[vocab × dim]`.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = self.dims2("embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::dim("embedding_lookup", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                op: "embedding_lookup",
                index: bad,
                extent: vocab,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        {
            let d = self.data();
            for &i in ids {
                out.extend_from_slice(&d[i * dim..(i + 1) * dim]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "embedding_lookup",
            vec![ids.len(), dim],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut table = vec![0.0; vocab * dim];
                for (row, &i) in ids.iter().enumerate() {
                    for (t, v) in table[i * dim..(i + 1) * dim].iter_mut().zip(&g[row * dim..(row + 1) * dim]) {
                        *t += v;
                    }
                }
                vec![Some(table)]
            }),
        ))
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Result<Tensor> {
        let x = self.to_vec();
        let out = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)).tanh()))
            .collect();
        Ok(Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let grad = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| {
                        let u = SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![Some(grad)]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (both of length equal to the last extent); epsilon 1e-5.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let (rows, cols) = last_axis("layer_norm", self)?;
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(Error::dim(
                "layer_norm",
                format!("affine params {:?}/{:?} for last axis {cols}", gamma.shape(), beta.shape()),
            ));
        }
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gm[c] + bt[c];
            }
        }
        drop((x, gm, bt));
        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let gm = gt.data();
                let gx = need(&xt).then(|| {
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dh: Vec<f64> = gr.iter().zip(gm.iter()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] = inv_std[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    gx
                });
                let ggamma = need(&gt).then(|| {
                    let mut acc = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        acc[i % cols] += v * xhat[i];
                    }
                    acc
                });
                let gbeta = need(&bt).then(|| {
                    let mut acc = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        acc[i % cols] += v;
                    }
                    acc
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// RMS normalization over the last axis: `x / sqrt(mean(x²) + 1e-5) · gamma`.
    pub fn rms_norm(&self, gamma: &Tensor) -> Result<Tensor> {
        let (rows, cols) = last_axis("rms_norm", self)?;
        if gamma.numel() != cols {
            return Err(Error::dim(
                "rms_norm",
                format!("gain {:?} for last axis {cols}", gamma.shape()),
            ));
        }
        let x = self.to_vec();
        let gm = gamma.to_vec();
        let mut inv_rms = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let ir = 1.0 / (ms + LN_EPS).sqrt();
            inv_rms[r] = ir;
            for c in 0..cols {
                out[r * cols + c] = row[c] * ir * gm[c];
            }
        }
        let (xt, gt) = (self.clone(), gamma.clone());
        Ok(Tensor::from_op(
            "rms_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone()],
            Box::new(move |g| {
                let gx = need(&xt).then(|| {
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let row = &x[r * cols..(r + 1) * cols];
                        let ir = inv_rms[r];
                        let u: Vec<f64> = g[r * cols..(r + 1) * cols].iter().zip(&gm).map(|(a, b)| a * b).collect();
                        let dot = u.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                        let k = dot * ir * ir * ir / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] = u[c] * ir - row[c] * k;
                        }
                    }
                    gx
                });
                let ggamma = need(&gt).then(|| {
                    let mut acc = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        acc[i % cols] += v * x[i] * inv_rms[i / cols];
                    }
                    acc
                });
                vec![gx, ggamma]
            }),
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = last_axis("softmax_rows", self)?;
        let x = self.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = (v - max).exp();
                total += *dst;
            }
            for dst in o.iter_mut() {
                *dst /= total;
            }
        }
        drop(x);
        let y = out.clone();
        Ok(Tensor::from_op(
            "softmax_rows",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sets entries above the causal diagonal of a `[T × S]` score matrix to
    /// −∞. Row `i` is the query at absolute position `S − T + i`, so it may
    /// see columns `0..=S − T + i`.
    pub fn causal_mask_fill(&self) -> Result<Tensor> {
        let (t, s) = self.dims2("causal_mask_fill")?;
        if s < t {
            return Err(Error::dim(
                "causal_mask_fill",
                format!("key axis {s} shorter than query axis {t}"),
            ));
        }
        let offset = s - t;
        let mut out = self.to_vec();
        for i in 0..t {
            for j in (offset + i + 1)..s {
                out[i * s + j] = f64::NEG_INFINITY;
            }
        }
        Ok(Tensor::from_op(
            "causal_mask_fill",
            vec![t, s],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = g.to_vec();
                for i in 0..t {
                    for j in (offset + i + 1)..s {
                        gx[i * s + j] = 0.0;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().sum();
        let n = self.numel();
        Ok(Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        ))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Ok(Tensor::from_op(
            "mean",
            vec![1],
            vec![total / n as f64],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
        ))
    }

    /// Mean over positions with `mask == 1` of `−log softmax(logits[t])[target_t]`.
    /// Unmasked rows contribute nothing to the value or the gradient.
    pub fn masked_cross_entropy(&self, targets: &[usize], mask: &[u8]) -> Result<Tensor> {
        let op = "masked_cross_entropy";
        let (t, v) = self.dims2(op)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(
                op,
                format!("{t} logit rows but {} targets and {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = mask.iter().find(|&&m| m > 1) {
            return Err(Error::Contract(format!("{op}: mask entries must be 0 or 1, got {bad}")));
        }
        let count = mask.iter().filter(|&&m| m == 1).count();
        if count == 0 {
            return Err(Error::EmptyLoss("loss mask selects no positions".into()));
        }
        for (&tg, &m) in targets.iter().zip(mask) {
            if m == 1 && tg >= v {
                return Err(Error::Index {
                    op,
                    index: tg,
                    extent: v,
                });
            }
        }
        let x = self.data();
        let mut total = 0.0;
        let mut probs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(count);
        for r in 0..t {
            if mask[r] == 0 {
                continue;
            }
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() + max - row[targets[r]];
            probs.push((r, exps.into_iter().map(|e| e / z).collect()));
        }
        drop(x);
        let targets = targets.to_vec();
        let n = count as f64;
        Ok(Tensor::from_op(
            op,
            vec![1],
            vec![total / n],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; t * v];
                let s = g[0] / n;
                for (r, p) in &probs {
                    let dst = &mut gx[r * v..(r + 1) * v];
                    for (d, &pv) in dst.iter_mut().zip(p) {
                        *d = pv * s;
                    }
                    dst[targets[*r]] -= s;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_closed_form() {
        let _g = Precision::F64.scoped();
        let y = t(&[1, 2], &[0.0, 3f64.ln()]).softmax_rows().unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let _g = Precision::F64.scoped();
        let a = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        let b = t(&[4, 3], &[0.2, 1.0, -1.0, 2.0, 0.0, 0.5, -0.3, 0.7, 1.1, 0.0, 0.0, 4.0]);
        let fused = a.matmul_t(&b).unwrap();
        let plain = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(fused.shape(), &[2, 4]);
        assert_eq!(fused.to_vec(), plain.to_vec());
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let y = t(&[1, 2], &[1000.0, 1000.0]).softmax_rows().unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn matmul_rejects_nonconforming() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match a.matmul(&b) {
            Err(Error::Dimension { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("axis 1 = 3") && detail.contains("axis 0 = 4"));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn embedding_index_out_of_range() {
        let table = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            table.embedding_lookup(&[1, 4]),
            Err(Error::Index { index: 4, extent: 4, .. })
        ));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let _g = Precision::F64.scoped();
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 5.0, 7.0]);
        let ones = t(&[4], &[1.0; 4]);
        let zeros = t(&[4], &[0.0; 4]);
        let y = x.layer_norm(&ones, &zeros).unwrap().to_vec();
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn causal_fill_masks_future() {
        let x = Tensor::zeros(&[3, 3]).causal_mask_fill().unwrap().to_vec();
        assert_eq!(x[1], f64::NEG_INFINITY);
        assert_eq!(x[3], 0.0);
        assert_eq!(x[5], f64::NEG_INFINITY);
        assert_eq!(x[8], 0.0);
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.slice(1, 2, 1).unwrap().to_vec(), b.to_vec());
        assert!(c.slice(1, 2, 2).is_err());
    }

    #[test]
    fn bias_broadcast_add() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::param(&[2], vec![10.0, 20.0]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
        assert!(x.add(&t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let _g = Precision::F64.scoped();
        let l = t(&[1, 2], &[0.0, 0.0]).masked_cross_entropy(&[0], &[1]).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_three_way_value() {
        let _g = Precision::F64.scoped();
        // -log(e^3 / (e^1 + e^2 + e^3)) evaluated by hand
        let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((expected - 0.407606).abs() < 1e-6);
        let l = t(&[1, 3], &[1.0, 2.0, 3.0]).masked_cross_entropy(&[2], &[1]).unwrap();
        assert!((l.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let a = t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 1.0, -2.0]);
        let b = t(&[2, 3], &[0.3, -1.0, 2.0, -7.0, 9.0, 0.5]);
        let la = a.masked_cross_entropy(&[1, 0], &[1, 0]).unwrap().item();
        let lb = b.masked_cross_entropy(&[1, 0], &[1, 0]).unwrap().item();
        assert_eq!(la, lb);
        let p = Tensor::param(&[2, 3], a.to_vec()).unwrap();
        p.masked_cross_entropy(&[1, 0], &[1, 0]).unwrap().backward().unwrap();
        assert!(p.grad().unwrap()[3..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_empty_mask_errors() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.masked_cross_entropy(&[0, 0], &[0, 0]), Err(Error::EmptyLoss(_))));
        assert!(matches!(
            a.masked_cross_entropy(&[3, 0], &[1, 0]),
            Err(Error::Index { .. })
        ));
    }
}
