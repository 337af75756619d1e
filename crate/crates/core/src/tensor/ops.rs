//! Forward ops and their backward closures.
//!
//! Broadcasting is deliberately narrow: elementwise ops accept equal shapes,
//! a scalar right operand, or a right operand whose shape is a suffix of the
//! left shape (the leading-batch case). Everything else is a hard error.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{strides, Scalar, Tensor, TensorError};

/// Row count above which matmul parallelizes across output rows. Each output
/// row is produced by exactly one task with a fixed sequential inner loop, so
/// results are identical for any thread count.
const PAR_ROW_THRESHOLD: usize = 64;

fn mm_rowwise<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    let row_job = |row: usize, out_row: &mut [F]| {
        let bi = row / m;
        let a_row = &a[row * k..(row + 1) * k];
        let b_base = if b_batched { bi * k * n } else { 0 };
        for (p, &aik) in a_row.iter().enumerate() {
            if aik != F::zero() {
                let b_row = &b[b_base + p * n..b_base + (p + 1) * n];
                for (c, &bv) in out_row.iter_mut().zip(b_row) {
                    *c = *c + aik * bv;
                }
            }
        }
    };
    if batch * m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, out_row)| row_job(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            row_job(row, out_row);
        }
    }
}

/// C = A · Bᵀ with A [m×n], B [k×n] → C [m×k]; rows of both operands are
/// contiguous, which keeps the backward pass as fast as the forward.
fn mm_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    let row_job = |i: usize, out_row: &mut [F]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (p, c) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *c = *c + acc;
        }
    };
    if m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, out_row)| row_job(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(k).enumerate() {
            row_job(i, out_row);
        }
    }
}

/// C += Aᵀ · B with A [m×k], B [m×n] → C [k×n].
fn mm_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let row_job = |p: usize, out_row: &mut [F]| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip != F::zero() {
                let b_row = &b[i * n..(i + 1) * n];
                for (c, &bv) in out_row.iter_mut().zip(b_row) {
                    *c = *c + aip * bv;
                }
            }
        }
    };
    if k >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, out_row)| row_job(p, out_row));
    } else {
        for (p, out_row) in out.chunks_mut(n).enumerate() {
            row_job(p, out_row);
        }
    }
}

enum Broadcast {
    Same,
    Scalar,
    Suffix,
}

fn broadcast_kind(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<Broadcast, TensorError> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    let rnum: usize = rhs.iter().product();
    if rnum == 1 {
        return Ok(Broadcast::Scalar);
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(Broadcast::Suffix);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

impl<F: Scalar> Tensor<F> {
    /// Standard normal draws scaled by `std`. Sampling happens in `f64` so
    /// `f32` and `f64` builds consume identical random streams.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data).expect("randn shape")
    }

    fn binary_elementwise(
        &self,
        rhs: &Tensor<F>,
        op: &'static str,
        fwd: impl Fn(F, F) -> F,
        // d(out)/d(lhs), d(out)/d(rhs) evaluated at the input values
        dl: impl Fn(F, F) -> F + 'static,
        dr: impl Fn(F, F) -> F + 'static,
    ) -> Result<Tensor<F>, TensorError> {
        let kind = broadcast_kind(self.shape(), rhs.shape(), op)?;
        let a = self.data();
        let b = rhs.data();
        let rn = b.len();
        let data: Vec<F> = match kind {
            Broadcast::Same => a.iter().zip(b.iter()).map(|(&x, &y)| fwd(x, y)).collect(),
            Broadcast::Scalar => a.iter().map(|&x| fwd(x, b[0])).collect(),
            Broadcast::Suffix => a
                .iter()
                .enumerate()
                .map(|(i, &x)| fwd(x, b[i % rn]))
                .collect(),
        };
        let shape = self.shape().to_vec();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), rhs.clone()],
            move |node, up| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                let rn = b.len();
                let ga: Vec<F> = up
                    .iter()
                    .enumerate()
                    .map(|(i, &u)| u * dl(a[i], b[i % rn]))
                    .collect();
                let mut gb = vec![F::zero(); rn];
                for (i, &u) in up.iter().enumerate() {
                    gb[i % rn] = gb[i % rn] + u * dr(a[i], b[i % rn]);
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.binary_elementwise(rhs, "add", |x, y| x + y, |_, _| F::one(), |_, _| F::one())
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.binary_elementwise(
            rhs,
            "sub",
            |x, y| x - y,
            |_, _| F::one(),
            |_, _| -F::one(),
        )
    }

    /// Elementwise product (same broadcast rules as `add`).
    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.binary_elementwise(rhs, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn neg(&self) -> Tensor<F> {
        self.mul_scalar(-F::one())
    }

    pub fn mul_scalar(&self, c: F) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |_, up| vec![Some(up.iter().map(|&u| u * c).collect())],
        )
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            |_, up| vec![Some(up.to_vec())],
        )
    }

    /// Matrix product. Accepts `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]` and the
    /// mixed projection case `[b,m,k]·[k,n]`.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        let (batch, m, k, out_shape, b_batched) = match (ls.len(), rs.len()) {
            (2, 2) => {
                if ls[1] != rs[0] {
                    return Err(mismatch());
                }
                (1, ls[0], ls[1], vec![ls[0], rs[1]], false)
            }
            (3, 3) => {
                if ls[0] != rs[0] || ls[2] != rs[1] {
                    return Err(mismatch());
                }
                (ls[0], ls[1], ls[2], vec![ls[0], ls[1], rs[2]], true)
            }
            (3, 2) => {
                if ls[2] != rs[0] {
                    return Err(mismatch());
                }
                (ls[0], ls[1], ls[2], vec![ls[0], ls[1], rs[1]], false)
            }
            _ => return Err(mismatch()),
        };
        let n = *rs.last().unwrap();
        let mut out = vec![F::zero(); batch * m * n];
        mm_rowwise(&self.data(), &rhs.data(), &mut out, batch, m, k, n, b_batched);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            move |node, up| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                // dA = dC · Bᵀ, per batch.
                let mut ga = vec![F::zero(); a.len()];
                for bi in 0..batch {
                    let dc = &up[bi * m * n..(bi + 1) * m * n];
                    let b_sl = if b_batched {
                        &b[bi * k * n..(bi + 1) * k * n]
                    } else {
                        &b[..]
                    };
                    mm_nt(dc, b_sl, &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                }
                // dB = Aᵀ · dC, accumulated over batches when B is shared.
                let mut gb = vec![F::zero(); b.len()];
                for bi in 0..batch {
                    let dc = &up[bi * m * n..(bi + 1) * m * n];
                    let a_sl = &a[bi * m * k..(bi + 1) * m * k];
                    let gb_sl = if b_batched {
                        &mut gb[bi * k * n..(bi + 1) * k * n]
                    } else {
                        &mut gb[..]
                    };
                    mm_tn(a_sl, dc, gb_sl, m, k, n);
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    /// Axis permutation; backward applies the inverse permutation.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<F>, TensorError> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Contract(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(&self.data(), self.shape(), perm);
        let perm_owned = perm.to_vec();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            move |node, up| {
                let mut inverse = vec![0usize; perm_owned.len()];
                for (i, &p) in perm_owned.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![Some(permute_data(up, &node.shape, &inverse))]
            },
        ))
    }

    pub fn transpose_last2(&self) -> Result<Tensor<F>, TensorError> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::Contract(
                "transpose_last2 needs rank >= 2".into(),
            ));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data_clone(),
            vec![self.clone()],
            |_, up| vec![Some(up.to_vec())],
        ))
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                bound: *shape.get(axis).unwrap_or(&0),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            move |node, up| {
                let mut g = vec![F::zero(); node.parents[0].numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&up[src..src + len * inner]);
                }
                vec![Some(g)]
            },
        ))
    }

    /// Gathers rows of a `[n, d]` tensor; backward scatter-adds. This is the
    /// embedding lookup.
    pub fn select_rows(&self, ids: &[u32]) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Contract(
                "select_rows expects a rank-2 tensor".into(),
            ));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "select_rows",
                index: bad as usize,
                bound: rows,
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let base = id as usize * width;
            data.extend_from_slice(&src[base..base + width]);
        }
        drop(src);
        let ids_owned = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids_owned.len(), width],
            data,
            vec![self.clone()],
            move |node, up| {
                let mut g = vec![F::zero(); node.parents[0].numel()];
                for (i, &id) in ids_owned.iter().enumerate() {
                    let dst = id as usize * width;
                    let src = &up[i * width..(i + 1) * width];
                    for (a, &b) in g[dst..dst + width].iter_mut().zip(src) {
                        *a = *a + b;
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "softmax",
                index: axis,
                bound: shape.len(),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data();
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let mut max = F::neg_infinity();
                for t in 0..len {
                    max = max.max(src[idx(t)]);
                }
                let mut denom = F::zero();
                for t in 0..len {
                    let e = (src[idx(t)] - max).exp();
                    data[idx(t)] = e;
                    denom = denom + e;
                }
                for t in 0..len {
                    data[idx(t)] = data[idx(t)] / denom;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            move |node, up| {
                let y = node.data.borrow();
                let mut g = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + i;
                        let mut dot = F::zero();
                        for t in 0..len {
                            dot = dot + up[idx(t)] * y[idx(t)];
                        }
                        for t in 0..len {
                            g[idx(t)] = y[idx(t)] * (up[idx(t)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// Softmax over the last axis restricted to `allowed` positions.
    /// A fully-masked row yields all-zero weights (and a zero gradient),
    /// keeping padded attention rows finite.
    pub fn masked_softmax(&self, allowed: &[bool]) -> Result<Tensor<F>, TensorError> {
        if allowed.len() != self.numel() {
            return Err(TensorError::Contract(format!(
                "masked_softmax: mask length {} != numel {}",
                allowed.len(),
                self.numel()
            )));
        }
        let shape = self.shape();
        let len = *shape.last().ok_or_else(|| {
            TensorError::Contract("masked_softmax needs rank >= 1".into())
        })?;
        let rows = self.numel() / len;
        let src = self.data();
        let mut data = vec![F::zero(); src.len()];
        for r in 0..rows {
            let base = r * len;
            let mut max = F::neg_infinity();
            for t in 0..len {
                if allowed[base + t] {
                    max = max.max(src[base + t]);
                }
            }
            if !max.is_finite() {
                continue; // fully masked row stays zero
            }
            let mut denom = F::zero();
            for t in 0..len {
                if allowed[base + t] {
                    let e = (src[base + t] - max).exp();
                    data[base + t] = e;
                    denom = denom + e;
                }
            }
            for t in 0..len {
                data[base + t] = data[base + t] / denom;
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            move |node, up| {
                let y = node.data.borrow();
                let mut g = vec![F::zero(); y.len()];
                for r in 0..rows {
                    let base = r * len;
                    let mut dot = F::zero();
                    for t in 0..len {
                        dot = dot + up[base + t] * y[base + t];
                    }
                    for t in 0..len {
                        g[base + t] = y[base + t] * (up[base + t] - dot);
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// Per-position normalization over the last axis followed by an affine
    /// transform with `gain` and `bias` of shape `[d]`.
    pub fn layer_norm(
        &self,
        gain: &Tensor<F>,
        bias: &Tensor<F>,
        eps: f64,
    ) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| {
            TensorError::Contract("layer_norm needs rank >= 1".into())
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape.to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let eps = F::from_f64(eps);
        let src = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut data = vec![F::zero(); src.len()];
        let mut xhat = vec![F::zero(); src.len()];
        let mut inv_std = vec![F::zero(); rows];
        let dn = F::from_f64(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<F>()
                / dn;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + b[j];
            }
        }
        drop(src);
        drop(g);
        drop(b);
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |node, up| {
                let g = node.parents[1].data();
                let mut dx = vec![F::zero(); node.parents[0].numel()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..rows {
                    let base = r * d;
                    let mut sum_dyg = F::zero();
                    let mut sum_dyg_xhat = F::zero();
                    for j in 0..d {
                        let dyg = up[base + j] * g[j];
                        sum_dyg = sum_dyg + dyg;
                        sum_dyg_xhat = sum_dyg_xhat + dyg * xhat[base + j];
                        dgain[j] = dgain[j] + up[base + j] * xhat[base + j];
                        dbias[j] = dbias[j] + up[base + j];
                    }
                    let istd = inv_std[r];
                    for j in 0..d {
                        let dyg = up[base + j] * g[j];
                        dx[base + j] = istd
                            * (dyg - sum_dyg / dn - xhat[base + j] * sum_dyg_xhat / dn);
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            },
        ))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor<F> {
        let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + k * x * x * x);
                half * x * (F::one() + u.tanh())
            })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |node, up| {
                let x = node.parents[0].data();
                let three = F::from_f64(3.0);
                let g: Vec<F> = up
                    .iter()
                    .zip(x.iter())
                    .map(|(&u, &xv)| {
                        let inner = c * (xv + k * xv * xv * xv);
                        let t = inner.tanh();
                        let sech2 = F::one() - t * t;
                        let d = half * (F::one() + t)
                            + half * xv * sech2 * c * (F::one() + three * k * xv * xv);
                        u * d
                    })
                    .collect();
                vec![Some(g)]
            },
        )
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let total: F = self.data().iter().copied().sum();
        Tensor::from_op(vec![], vec![total], vec![self.clone()], |node, up| {
            vec![Some(vec![up[0]; node.parents[0].numel()])]
        })
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.numel();
        let scale = F::from_f64(1.0 / n as f64);
        let total: F = self.data().iter().copied().sum::<F>() * scale;
        Tensor::from_op(vec![], vec![total], vec![self.clone()], move |node, up| {
            vec![Some(vec![up[0] * scale; node.parents[0].numel()])]
        })
    }

    /// Mean negative log-softmax probability of `targets` over rows whose
    /// target differs from `ignore_id`. An all-ignored batch is defined as
    /// loss 0 with zero gradient.
    pub fn cross_entropy_logits(
        &self,
        targets: &[u32],
        ignore_id: u32,
    ) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: shape.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, v) = (shape[0], shape[1]);
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| t != ignore_id && t as usize >= v)
        {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_logits",
                index: bad as usize,
                bound: v,
            });
        }
        let src = self.data();
        let mut count = 0usize;
        let mut total = F::zero();
        // log-softmax probabilities saved for the backward pass
        let mut probs = vec![F::zero(); src.len()];
        for r in 0..n {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[r * v + j] = e;
                denom = denom + e;
            }
            for j in 0..v {
                probs[r * v + j] = probs[r * v + j] / denom;
            }
            if targets[r] != ignore_id {
                count += 1;
                let lse = denom.ln() + max;
                total = total + lse - row[targets[r] as usize];
            }
        }
        drop(src);
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::from_f64(count as f64)
        };
        let targets_owned = targets.to_vec();
        Ok(Tensor::from_op(
            vec![],
            vec![loss],
            vec![self.clone()],
            move |_, up| {
                if count == 0 {
                    return vec![Some(vec![F::zero(); n * v])];
                }
                let inv = F::from_f64(1.0 / count as f64);
                let mut g = vec![F::zero(); n * v];
                for r in 0..n {
                    if targets_owned[r] == ignore_id {
                        continue;
                    }
                    for j in 0..v {
                        g[r * v + j] = up[0] * inv * probs[r * v + j];
                    }
                    let t = targets_owned[r] as usize;
                    g[r * v + t] = g[r * v + t] - up[0] * inv;
                }
                vec![Some(g)]
            },
        ))
    }
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat<F: Scalar>(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(TensorError::IndexOutOfRange {
            op: "concat",
            index: axis,
            bound: rank,
        });
    }
    let mut axis_total = 0usize;
    for p in parts {
        if p.shape().len() != rank
            || p.shape()
                .iter()
                .enumerate()
                .any(|(i, &s)| i != axis && s != first.shape()[i])
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        axis_total += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = vec![F::zero(); outer * axis_total * inner];
    let mut offset = 0usize;
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    for (p, &sz) in parts.iter().zip(&sizes) {
        let src = p.data();
        for o in 0..outer {
            let dst = (o * axis_total + offset) * inner;
            let s = o * sz * inner;
            data[dst..dst + sz * inner].copy_from_slice(&src[s..s + sz * inner]);
        }
        offset += sz;
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        parts.to_vec(),
        move |_, up| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut offset = 0usize;
            for &sz in &sizes {
                let mut g = vec![F::zero(); outer * sz * inner];
                for o in 0..outer {
                    let src = (o * axis_total + offset) * inner;
                    let dst = o * sz * inner;
                    g[dst..dst + sz * inner].copy_from_slice(&up[src..src + sz * inner]);
                }
                grads.push(Some(g));
                offset += sz;
            }
            grads
        },
    ))
}

fn permute_data<F: Scalar>(src: &[F], in_shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![F::zero(); src.len()];
    let n = src.len();
    for (out_idx, slot) in out.iter_mut().enumerate().take(n) {
        let mut rem = out_idx;
        let mut src_idx = 0usize;
        for d in 0..rank {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            src_idx += coord * in_strides[perm[d]];
        }
        *slot = src[src_idx];
    }
    out
}
