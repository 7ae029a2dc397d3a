use std::rc::Rc;

use super::broadcast::{broadcast_shape, Plan};
use super::{numel, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Expands `t` to `out` under trailing-dimension broadcasting.
pub(crate) fn expand<F: Real>(t: &Tensor<F>, out: &[usize]) -> Tensor<F> {
    if t.shape() == out {
        return t.clone();
    }
    let src = t.data();
    let mut data = vec![F::zero(); numel(out)];
    Plan::new(t.shape(), out).for_each(out, |o, i| data[o] = src[i]);
    Tensor::new(out, data).expect("expand")
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to<F: Real>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if g.shape() == shape {
        return g.clone();
    }
    let src = g.data();
    let mut data = vec![F::zero(); numel(shape)];
    Plan::new(shape, g.shape()).for_each(g.shape(), |o, i| data[i] += src[o]);
    Tensor::new(shape, data).expect("reduce_to")
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map")
}

fn zip3_map<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    c: &Tensor<F>,
    f: impl Fn(F, F, F) -> F,
) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape(), data).expect("zip3_map")
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'g, F: Real> Var<'g, F> {
    fn binary(self, other: Var<'g, F>, op: Binary) -> Result<Var<'g, F>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape()).map_err(|_| Error::ShapeMismatch {
            op: match op {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let ea = expand(&a, &out_shape);
        let eb = expand(&b, &out_shape);
        let value = match op {
            Binary::Add => zip_map(&ea, &eb, |x, y| x + y),
            Binary::Sub => zip_map(&ea, &eb, |x, y| x - y),
            Binary::Mul => zip_map(&ea, &eb, |x, y| x * y),
            Binary::Div => zip_map(&ea, &eb, |x, y| x / y),
        };
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (ea, eb) = (Rc::new(ea), Rc::new(eb));
        Ok(self
            .graph
            .custom(&[self, other], value, move |g, sink| match op {
                Binary::Add => {
                    if sink.wants(0) {
                        sink.add(0, reduce_to(g, &sa));
                    }
                    if sink.wants(1) {
                        sink.add(1, reduce_to(g, &sb));
                    }
                }
                Binary::Sub => {
                    if sink.wants(0) {
                        sink.add(0, reduce_to(g, &sa));
                    }
                    if sink.wants(1) {
                        sink.add(1, reduce_to(&g.map(|v| -v), &sb));
                    }
                }
                Binary::Mul => {
                    if sink.wants(0) {
                        sink.add(0, reduce_to(&zip_map(g, &eb, |d, y| d * y), &sa));
                    }
                    if sink.wants(1) {
                        sink.add(1, reduce_to(&zip_map(g, &ea, |d, x| d * x), &sb));
                    }
                }
                Binary::Div => {
                    if sink.wants(0) {
                        sink.add(0, reduce_to(&zip_map(g, &eb, |d, y| d / y), &sa));
                    }
                    if sink.wants(1) {
                        let gb = zip3_map(g, &ea, &eb, |d, x, y| -d * x / (y * y));
                        sink.add(1, reduce_to(&gb, &sb));
                    }
                }
            }))
    }

    pub fn add(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        self,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Var<'g, F> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = Rc::new(y.clone());
        self.graph.custom(&[self], y, move |g, sink| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&d, &xv), &yv)| d * df(xv, yv))
                .collect();
            sink.add(0, Tensor::new(g.shape(), data).unwrap());
        })
    }

    pub fn neg(self) -> Var<'g, F> {
        self.unary(|x| -x, |_, _| -F::one())
    }

    pub fn exp(self) -> Var<'g, F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(self) -> Var<'g, F> {
        self.unary(|x| x.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, F> {
        self.unary(|x| x.sqrt(), |_, y| F::c(0.5) / y)
    }

    pub fn sqr(self) -> Var<'g, F> {
        self.unary(|x| x * x, |x, _| F::c(2.0) * x)
    }

    pub fn abs(self) -> Var<'g, F> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn sigmoid(self) -> Var<'g, F> {
        self.unary(sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn silu(self) -> Var<'g, F> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (F::one() - s)
            },
        )
    }

    pub fn softplus(self) -> Var<'g, F> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(self) -> Var<'g, F> {
        self.unary(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn relu(self) -> Var<'g, F> {
        self.unary(
            |x| x.max(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, F> {
        let (lo, hi) = (F::c(lo), F::c(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn scale(self, k: f64) -> Var<'g, F> {
        let k = F::c(k);
        self.unary(move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, F> {
        let c = F::c(c);
        self.unary(move |x| x + c, |_, _| F::one())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, F>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = (*x).clone().reshape(shape)?;
        Ok(self.graph.custom(&[self], value, move |g, sink| {
            sink.add(0, g.clone().reshape(&old).unwrap());
        }))
    }

    /// Broadcasts to `shape` (trailing-dimension rules).
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, F>> {
        let x = self.value();
        let target = broadcast_shape(x.shape(), shape)?;
        if target != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let old = x.shape().to_vec();
        let value = expand(&x, shape);
        Ok(self.graph.custom(&[self], value, move |g, sink| {
            sink.add(0, reduce_to(g, &old));
        }))
    }

    fn check_axes(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let shape = self.shape();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::InvalidAxis {
                    axis: a,
                    rank: shape.len(),
                });
            }
        }
        Ok(shape)
    }

    /// Sum over `axes`.
    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'g, F>> {
        let shape = self.check_axes(axes)?;
        let kshape: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let x = self.value();
        let summed = reduce_to(&x, &kshape);
        let out_shape: Vec<usize> = if keepdim {
            kshape.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let value = summed.reshape(&out_shape)?;
        Ok(self.graph.custom(&[self], value, move |g, sink| {
            let g = g.clone().reshape(&kshape).unwrap();
            sink.add(0, expand(&g, &shape));
        }))
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'g, F>> {
        let shape = self.check_axes(axes)?;
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        Ok(self.sum_axes(axes, keepdim)?.scale(1.0 / count as f64))
    }

    pub fn sum(self) -> Var<'g, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        self.graph.custom(&[self], value, move |g, sink| {
            sink.add(0, Tensor::full(&shape, g.item()));
        })
    }

    pub fn mean(self) -> Var<'g, F> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Matrix product over the last two axes with broadcast leading axes.
    ///
    /// `self: [.., m, k]`, `rhs: [.., k, n]` gives `[.., m, n]`. A rank-2 `rhs`
    /// is applied to every row of `self`.
    pub fn matmul(self, rhs: Var<'g, F>) -> Result<Var<'g, F>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.is_empty() || sb.len() < 2 || (sb.len() > 2 && sa.len() < 2) {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        let n = sb[sb.len() - 1];
        if sb.len() == 2 {
            let rows = a.numel() / k.max(1);
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            let mut out = vec![F::zero(); rows * n];
            gemm(rows, k, n, a.data(), false, b.data(), false, &mut out, F::zero());
            let value = Tensor::new(&out_shape, out)?;
            return Ok(self.graph.custom(&[self, rhs], value, move |g, sink| {
                if sink.wants(0) {
                    // dA = dC · Bᵀ
                    sink.with(0, |da| gemm(rows, n, k, g.data(), false, b.data(), true, da, F::one()));
                }
                if sink.wants(1) {
                    // dB = Aᵀ · dC
                    sink.with(1, |db| gemm(k, rows, n, a.data(), true, g.data(), false, db, F::one()));
                }
            }));
        }
        let m = sa[sa.len() - 2];
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).map_err(|_| mismatch())?;
        let nb = numel(&batch);
        let mut ia = vec![0; nb];
        let mut ib = vec![0; nb];
        Plan::new(batch_a, &batch).for_each(&batch, |o, i| ia[o] = i);
        Plan::new(batch_b, &batch).for_each(&batch, |o, i| ib[o] = i);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![F::zero(); nb * m * n];
        for bi in 0..nb {
            gemm(
                m,
                k,
                n,
                &a.data()[ia[bi] * m * k..][..m * k],
                false,
                &b.data()[ib[bi] * k * n..][..k * n],
                false,
                &mut out[bi * m * n..][..m * n],
                F::zero(),
            );
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.graph.custom(&[self, rhs], value, move |g, sink| {
            let gd = g.data();
            if sink.wants(0) {
                sink.with(0, |da| {
                    for bi in 0..nb {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..][..m * n],
                            false,
                            &b.data()[ib[bi] * k * n..][..k * n],
                            true,
                            &mut da[ia[bi] * m * k..][..m * k],
                            F::one(),
                        );
                    }
                });
            }
            if sink.wants(1) {
                sink.with(1, |db| {
                    for bi in 0..nb {
                        gemm(
                            k,
                            m,
                            n,
                            &a.data()[ia[bi] * m * k..][..m * k],
                            true,
                            &gd[bi * m * n..][..m * n],
                            false,
                            &mut db[ib[bi] * k * n..][..k * n],
                            F::one(),
                        );
                    }
                });
            }
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, F>> {
        let shape = self.check_axes(&[axis])?;
        if start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow {start}+{len} exceeds axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let x = self.value();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.graph.custom(&[self], value, move |g, sink| {
            sink.with(0, |dx| {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g.data()[o * len * inner..][..len * inner];
                    for (d, &s) in dx[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
        }))
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Var<'g, F>], axis: usize) -> Result<Var<'g, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let shape0 = first.check_axes(&[axis])?;
        let values: Vec<Rc<Tensor<F>>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            let ok = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: shape0.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..][..l * inner]);
            }
        }
        let mut out_shape = shape0.clone();
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, data)?;
        Ok(first.graph.custom(parts, value, move |g, sink| {
            let mut offset = 0;
            for (slot, &l) in lens.iter().enumerate() {
                if sink.wants(slot) {
                    sink.with(slot, |dx| {
                        for o in 0..outer {
                            let src = &g.data()[(o * total + offset) * inner..][..l * inner];
                            for (d, &s) in dx[o * l * inner..][..l * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                }
                offset += l;
            }
        }))
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, optionally transposed
/// in storage (`ta` means `a` is stored as `k×m`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    c: &mut [F],
    beta: F,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn add_vectors() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(&[1.0, 2.0]));
        let b = g.constant(Tensor::vector(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn clamp_bounds() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(&[-12.0, 0.0, 12.0]));
        assert_eq!(a.clamp(-10.0, 10.0).value().data(), &[-10.0, 0.0, 10.0]);
    }

    #[test]
    fn sigmoid_zero() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::vector(&[0.0]));
        assert_eq!(a.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn matmul_small() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn identity_matmul() {
        let g = Graph::<f64>::new();
        let x: Vec<f64> = (0..9).map(|v| v as f64 * 0.7 - 2.0).collect();
        let eye = g.constant(
            Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let xv = g.constant(Tensor::from_f64(&[3, 3], &x).unwrap());
        assert_eq!(eye.matmul(xv).unwrap().value().data(), x.as_slice());
    }

    #[test]
    fn matmul_inner_mismatch_names_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn add_shape_mismatch_is_error() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(a.add(b).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0, 3.0]));
        let loss = x.sqr().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        let unused = g.param(Tensor::vector(&[5.0, 6.0, 7.0]));
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
        assert!(!grads.reaches(unused));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        assert!(g.backward(x.sqr()).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(&[3.0]));
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[7.0]);
    }

    #[test]
    fn sum_axes_keepdim_and_not() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = x.sum_axes(&[1], false).unwrap();
        assert_eq!(s.shape(), vec![2]);
        assert_eq!(s.value().data(), &[6.0, 15.0]);
        let s = x.mean_axes(&[0], true).unwrap();
        assert_eq!(s.shape(), vec![1, 3]);
        assert_eq!(s.value().data(), &[2.5, 3.5, 4.5]);
        assert!(x.sum_axes(&[2], false).is_err());
    }
}
