use std::rc::Rc;

use super::{Real, RngStream, Tensor, Var};
use crate::error::{Error, Result};

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

impl<'g, F: Real> Var<'g, F> {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, F>> {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis)?;
        let y = softmax_values(&x, outer, len, inner);
        let y_saved = Rc::new(y.clone());
        Ok(self.graph.custom(&[self], y, move |g, sink| {
            let (yd, gd) = (y_saved.data(), g.data());
            sink.with(0, |dx| {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: F = (0..len).map(|i| gd[idx(i)] * yd[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] += yd[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
            });
        }))
    }

    /// `log(softmax(x))` along `axis` without forming the softmax first.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'g, F>> {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![F::zero(); x.numel()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).fold(F::neg_infinity(), |m, i| m.max(xd[idx(i)]));
                let lse = max + (0..len).map(|i| (xd[idx(i)] - max).exp()).sum::<F>().ln();
                for i in 0..len {
                    out[idx(i)] = xd[idx(i)] - lse;
                }
            }
        }
        let y = Tensor::new(x.shape(), out)?;
        let y_saved = Rc::new(y.clone());
        Ok(self.graph.custom(&[self], y, move |g, sink| {
            let (yd, gd) = (y_saved.data(), g.data());
            sink.with(0, |dx| {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let total: F = (0..len).map(|i| gd[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] += gd[idx(i)] - yd[idx(i)].exp() * total;
                        }
                    }
                }
            });
        }))
    }

    /// Layer normalisation along `axis` with per-entry `gain` and `bias`
    /// (both shaped `[len(axis)]`).
    pub fn layer_norm(
        self,
        axis: usize,
        gain: Var<'g, F>,
        bias: Var<'g, F>,
        eps: f64,
    ) -> Result<Var<'g, F>> {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis)?;
        for p in [gain, bias] {
            if p.shape() != [len] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: p.shape(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let eps = F::c(eps);
        let xd = x.data();
        let nf = F::c(len as f64);
        let mut xhat = vec![F::zero(); x.numel()];
        let mut rstd = vec![F::zero(); outer * inner];
        let mut out = vec![F::zero(); x.numel()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| xd[idx(i)]).sum::<F>() / nf;
                let var = (0..len)
                    .map(|i| {
                        let d = xd[idx(i)] - mean;
                        d * d
                    })
                    .sum::<F>()
                    / nf;
                let r = F::one() / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for i in 0..len {
                    let h = (xd[idx(i)] - mean) * r;
                    xhat[idx(i)] = h;
                    out[idx(i)] = h * gv.data()[i] + bv.data()[i];
                }
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self
            .graph
            .custom(&[self, gain, bias], value, move |g, sink| {
                let gd = g.data();
                if sink.wants(0) {
                    sink.with(0, |dx| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |i: usize| (o * len + i) * inner + j;
                                let mut m1 = F::zero();
                                let mut m2 = F::zero();
                                for i in 0..len {
                                    let dh = gd[idx(i)] * gv.data()[i];
                                    m1 += dh;
                                    m2 += dh * xhat[idx(i)];
                                }
                                m1 /= nf;
                                m2 /= nf;
                                let r = rstd[o * inner + j];
                                for i in 0..len {
                                    let dh = gd[idx(i)] * gv.data()[i];
                                    dx[idx(i)] += r * (dh - m1 - xhat[idx(i)] * m2);
                                }
                            }
                        }
                    });
                }
                if sink.wants(1) || sink.wants(2) {
                    let mut dg = vec![F::zero(); len];
                    let mut db = vec![F::zero(); len];
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                let k = (o * len + i) * inner + j;
                                dg[i] += gd[k] * xhat[k];
                                db[i] += gd[k];
                            }
                        }
                    }
                    sink.add(1, Tensor::new(&[len], dg).unwrap());
                    sink.add(2, Tensor::new(&[len], db).unwrap());
                }
            }))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales
    /// survivors by `1/(1-p)`. Identity when `training` is false.
    pub fn dropout(self, p: f64, rng: &mut RngStream, training: bool) -> Result<Var<'g, F>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let keep = F::c(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(x.shape(), |_| {
            if rng.uniform() >= p {
                keep
            } else {
                F::zero()
            }
        });
        let m = self.graph.constant(mask);
        self.mul(m)
    }

    /// Pearson correlation along the last axis.
    ///
    /// `eps` is added to each standard deviation, so a constant input yields a
    /// correlation near zero rather than NaN.
    pub fn pearson(self, other: Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || a.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op: "pearson",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let n = *a.shape().last().unwrap();
        if n < 2 {
            return Err(Error::invalid("pearson needs at least two samples"));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("pearson eps must be positive"));
        }
        let rows = a.numel() / n;
        let nf = F::c(n as f64);
        let eps = F::c(eps);
        let mut ca = vec![F::zero(); a.numel()];
        let mut cb = vec![F::zero(); b.numel()];
        // per row: (sigma_a, sigma_b, s_ab, rho)
        let mut stats = Vec::with_capacity(rows);
        let mut rho = Vec::with_capacity(rows);
        for r in 0..rows {
            let ra = &a.data()[r * n..][..n];
            let rb = &b.data()[r * n..][..n];
            let ma = ra.iter().copied().sum::<F>() / nf;
            let mb = rb.iter().copied().sum::<F>() / nf;
            let (mut saa, mut sbb, mut sab) = (F::zero(), F::zero(), F::zero());
            for i in 0..n {
                let (x, y) = (ra[i] - ma, rb[i] - mb);
                ca[r * n + i] = x;
                cb[r * n + i] = y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
            let sa = (saa / nf).sqrt();
            let sb = (sbb / nf).sqrt();
            let p = sab / (nf * (sa + eps) * (sb + eps));
            stats.push((sa, sb, sab));
            rho.push(p);
        }
        let out_shape = a.shape()[..a.rank() - 1].to_vec();
        let value = Tensor::new(&out_shape, rho)?;
        Ok(self
            .graph
            .custom(&[self, other], value, move |g, sink| {
                let gd = g.data();
                for (slot, (mine, theirs)) in [(&ca, &cb), (&cb, &ca)].into_iter().enumerate() {
                    if !sink.wants(slot) {
                        continue;
                    }
                    sink.with(slot, |dx| {
                        for r in 0..rows {
                            let (sa, sb, sab) = stats[r];
                            let (s_me, s_other) = if slot == 0 { (sa, sb) } else { (sb, sa) };
                            let am = s_me + eps;
                            let bo = s_other + eps;
                            let base = gd[r] / (nf * am * bo);
                            // d sigma / d x_i = c_i / (n sigma), zero when sigma is zero
                            let k = if s_me > F::zero() {
                                gd[r] * sab / (nf * am * am * bo) / (nf * s_me)
                            } else {
                                F::zero()
                            };
                            for i in 0..n {
                                dx[r * n + i] += base * theirs[r * n + i] - k * mine[r * n + i];
                            }
                        }
                    });
                }
            }))
    }

    /// Gathers rows `idx[b]` along axis 1 of a `[B, N, D]` tensor.
    pub fn gather_rows(self, idx: &[Vec<usize>]) -> Result<Var<'g, F>> {
        let x = self.value();
        let (bsz, n, d) = dims3(x.shape(), "gather_rows")?;
        let k = uniform_len(idx, bsz, n)?;
        let mut data = Vec::with_capacity(bsz * k * d);
        for (b, rows) in idx.iter().enumerate() {
            for &r in rows {
                data.extend_from_slice(&x.data()[(b * n + r) * d..][..d]);
            }
        }
        let value = Tensor::new(&[bsz, k, d], data)?;
        let idx = idx.to_vec();
        Ok(self.graph.custom(&[self], value, move |g, sink| {
            sink.with(0, |dx| {
                for (b, rows) in idx.iter().enumerate() {
                    for (j, &r) in rows.iter().enumerate() {
                        let src = &g.data()[(b * k + j) * d..][..d];
                        for (o, &s) in dx[(b * n + r) * d..][..d].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
            });
        }))
    }

    /// Copy of `self: [B, N, D]` with rows `idx[b]` replaced by `src: [B, K, D]`.
    pub fn scatter_rows(self, src: Var<'g, F>, idx: &[Vec<usize>]) -> Result<Var<'g, F>> {
        let base = self.value();
        let s = src.value();
        let (bsz, n, d) = dims3(base.shape(), "scatter_rows")?;
        let k = uniform_len(idx, bsz, n)?;
        if s.shape() != [bsz, k, d] {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: base.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut data = base.data().to_vec();
        for (b, rows) in idx.iter().enumerate() {
            for (j, &r) in rows.iter().enumerate() {
                data[(b * n + r) * d..][..d].copy_from_slice(&s.data()[(b * k + j) * d..][..d]);
            }
        }
        let value = Tensor::new(base.shape(), data)?;
        let idx = idx.to_vec();
        Ok(self.graph.custom(&[self, src], value, move |g, sink| {
            if sink.wants(0) {
                let mut gb = g.clone();
                for (b, rows) in idx.iter().enumerate() {
                    for &r in rows {
                        gb.data_mut()[(b * n + r) * d..][..d].fill(F::zero());
                    }
                }
                sink.add(0, gb);
            }
            if sink.wants(1) {
                let mut gs = Vec::with_capacity(bsz * k * d);
                for (b, rows) in idx.iter().enumerate() {
                    for &r in rows {
                        gs.extend_from_slice(&g.data()[(b * n + r) * d..][..d]);
                    }
                }
                sink.add(1, Tensor::new(&[bsz, k, d], gs).unwrap());
            }
        }))
    }
}

pub(crate) fn softmax_values<F: Real>(
    x: &Tensor<F>,
    outer: usize,
    len: usize,
    inner: usize,
) -> Tensor<F> {
    let xd = x.data();
    let mut out = vec![F::zero(); x.numel()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).fold(F::neg_infinity(), |m, i| m.max(xd[idx(i)]));
            let mut total = F::zero();
            for i in 0..len {
                let e = (xd[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[idx(i)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("softmax")
}

fn dims3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, n, d] => Ok((b, n, d)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

fn uniform_len(idx: &[Vec<usize>], bsz: usize, n: usize) -> Result<usize> {
    if idx.len() != bsz {
        return Err(Error::invalid(format!(
            "index list has {} entries for batch {bsz}",
            idx.len()
        )));
    }
    let k = idx.first().map_or(0, |r| r.len());
    if idx.iter().any(|r| r.len() != k) {
        return Err(Error::RaggedMask(idx.iter().map(|r| r.len()).collect()));
    }
    if idx.iter().flatten().any(|&r| r >= n) {
        return Err(Error::invalid(format!("row index out of range for {n} rows")));
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, RngStream, Tensor};

    #[test]
    fn softmax_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = x.softmax(0).unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_is_stable() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(&[1000.0, 0.0]));
        let y = x.log_softmax(0).unwrap().value();
        assert!(y.is_finite());
        assert!(y.data()[0].abs() < 1e-6);
        assert!((y.data()[1] + 1000.0).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.5));
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = x.layer_norm(1, gain, bias, 1e-5).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_axis_is_error() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(x.softmax(2).is_err());
        assert!(x.log_softmax(5).is_err());
    }

    #[test]
    fn pearson_identities() {
        let g = Graph::<f64>::new();
        let xs: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect();
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        let x = g.constant(Tensor::vector(&xs));
        let nx = g.constant(Tensor::vector(&neg));
        let c = g.constant(Tensor::full(&[16], 2.0));
        assert!((x.pearson(x, 1e-8).unwrap().value().item() - 1.0).abs() < 1e-6);
        assert!((x.pearson(nx, 1e-8).unwrap().value().item() + 1.0).abs() < 1e-6);
        assert!(c.pearson(x, 1e-8).unwrap().value().item().abs() < 1e-3);
    }

    #[test]
    fn pearson_of_constant_has_finite_gradient() {
        let g = Graph::<f64>::new();
        let c = g.param(Tensor::full(&[8], 0.25));
        let y = g.constant(Tensor::vector(&[1.0, 3.0, 2.0, 5.0, 4.0, 0.0, 1.0, 2.0]));
        let loss = c.pearson(y, 1e-8).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(c).is_finite());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let mut rng = RngStream::new(1, 1);
        let y = x.dropout(0.5, &mut rng, false).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn dropout_expectation() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[100_000]));
        let mut rng = RngStream::new(7, 3);
        let y = x.dropout(0.5, &mut rng, true).unwrap().value();
        let mean = y.sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 4, 3], |i| i as f64));
        let idx = vec![vec![0, 2], vec![3, 1]];
        let gathered = x.gather_rows(&idx).unwrap();
        assert_eq!(gathered.shape(), vec![2, 2, 3]);
        let zeros = g.constant(Tensor::zeros(&[2, 4, 3]));
        let back = zeros.scatter_rows(gathered, &idx).unwrap().value();
        for b in 0..2 {
            for r in 0..4 {
                let kept = idx[b].contains(&r);
                for d in 0..3 {
                    let expect = if kept { x.value().at(&[b, r, d]) } else { 0.0 };
                    assert_eq!(back.at(&[b, r, d]), expect);
                }
            }
        }
        assert!(x.gather_rows(&[vec![0], vec![1, 2]]).is_err());
    }
}
