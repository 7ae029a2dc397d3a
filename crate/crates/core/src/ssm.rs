//! Bidirectional selective state-space blocks.
//!
//! The recurrence per batch element, channel `e` and state `n` is
//!
//! ```text
//! delta_t = softplus(x_t W_delta + b_delta)
//! h_t     = exp(delta_t[e] A[e,n]) h_{t-1} + delta_t[e] B_t[n] x_t[e],   h_0 = 0
//! y_t[e]  = sum_n C_t[n] h_t[e,n] + d[e] x_t[e]
//! ```
//!
//! with `A = -exp(a_log)`, `B_t = x_t W_B` and `C_t = x_t W_C`. There is no
//! short depthwise convolution in front of the scan.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamRole, ParamStore};
use crate::tensor::{Real, RngStream, Tensor, Var};

/// Scan direction. `Backward` scans the time-reversed sequence and reverses
/// the result back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Layer-norm epsilon used throughout the models.
pub const NORM_EPS: f64 = 1e-5;

/// Parameters of one directional selective scan over width `E` with `S` states.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub width: usize,
    pub state: usize,
    pub a_log: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub d: ParamId,
}

impl SsmParams {
    /// `a_log = ln(U[0.5, 8])`, projections U(±1/sqrt(fan_in)), `d = 1`.
    /// `b_delta` starts at softplus⁻¹(0.1) so the initial step size is 0.1.
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        width: usize,
        state: usize,
        rng: &mut RngStream,
    ) -> Self {
        let a_log = Tensor::from_fn(&[width, state], |_| F::c(rng.range(0.5, 8.0).ln()));
        let a_log = store.add(format!("{prefix}.a_log"), a_log, ParamRole::Weight);
        let w_delta = store.add_linear(format!("{prefix}.w_delta"), width, width, rng);
        let dt0: f64 = 0.1;
        let b_delta = store.add(
            format!("{prefix}.b_delta"),
            Tensor::full(&[width], F::c(dt0.exp_m1().ln())),
            ParamRole::Bias,
        );
        let w_b = store.add_linear(format!("{prefix}.w_b"), width, state, rng);
        let w_c = store.add_linear(format!("{prefix}.w_c"), width, state, rng);
        let d = store.add(format!("{prefix}.d"), Tensor::ones(&[width]), ParamRole::Weight);
        Self {
            width,
            state,
            a_log,
            w_delta,
            b_delta,
            w_b,
            w_c,
            d,
        }
    }
}

/// Selective scan of `x: [B, L, E]` in the given direction.
pub fn selective_scan<'g, F: Real>(
    x: Var<'g, F>,
    ssm: &SsmParams,
    p: &Bound<'g, F>,
    direction: Direction,
) -> Result<Var<'g, F>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != ssm.width {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            lhs: shape,
            rhs: vec![0, 0, ssm.width],
        });
    }
    let delta = x.matmul(p[ssm.w_delta])?.add(p[ssm.b_delta])?.softplus();
    let a = p[ssm.a_log].exp().neg();
    let b = x.matmul(p[ssm.w_b])?;
    let c = x.matmul(p[ssm.w_c])?;
    let y = scan_core(x, delta, a, b, c, direction)?;
    y.add(x.mul(p[ssm.d])?)
}

/// The fused recurrence without the skip term.
///
/// `x, delta: [B, L, E]`, `a: [E, S]` (negative decay rates), `b, c: [B, L, S]`.
/// States are kept from the forward sweep so the backward sweep is a single
/// reverse pass; cost is linear in `L`.
pub fn scan_core<'g, F: Real>(
    x: Var<'g, F>,
    delta: Var<'g, F>,
    a: Var<'g, F>,
    b: Var<'g, F>,
    c: Var<'g, F>,
    direction: Direction,
) -> Result<Var<'g, F>> {
    let (xv, dv, av, bv, cv) = (x.value(), delta.value(), a.value(), b.value(), c.value());
    let &[bsz, len, width] = xv.shape() else {
        return Err(Error::ShapeMismatch {
            op: "scan_core",
            lhs: xv.shape().to_vec(),
            rhs: vec![0, 0, 0],
        });
    };
    if len == 0 {
        return Err(Error::invalid("selective scan over an empty sequence"));
    }
    let state = av.shape().get(1).copied().unwrap_or(0);
    let mismatch = |rhs: &[usize]| Error::ShapeMismatch {
        op: "scan_core",
        lhs: xv.shape().to_vec(),
        rhs: rhs.to_vec(),
    };
    if dv.shape() != xv.shape() {
        return Err(mismatch(dv.shape()));
    }
    if av.shape() != [width, state] {
        return Err(mismatch(av.shape()));
    }
    if bv.shape() != [bsz, len, state] || cv.shape() != [bsz, len, state] {
        return Err(mismatch(bv.shape()));
    }
    let es = width * state;
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..len).collect(),
        Direction::Backward => (0..len).rev().collect(),
    };
    // states[b, t] and decays[b, t] are indexed by time, not step
    let mut states = vec![F::zero(); bsz * len * es];
    let mut decays = vec![F::zero(); bsz * len * es];
    let mut y = vec![F::zero(); bsz * len * width];
    let (xd, ddv, ad, bd, cd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data());
    for bi in 0..bsz {
        let mut h = vec![F::zero(); es];
        for &t in &order {
            let row = bi * len + t;
            let xt = &xd[row * width..][..width];
            let dt = &ddv[row * width..][..width];
            let bt = &bd[row * state..][..state];
            let ct = &cd[row * state..][..state];
            let dec = &mut decays[row * es..][..es];
            let yt = &mut y[row * width..][..width];
            for e in 0..width {
                let (de, xe) = (dt[e], xt[e]);
                let dx = de * xe;
                let mut acc = F::zero();
                for n in 0..state {
                    let k = e * state + n;
                    let ab = (de * ad[k]).exp();
                    dec[k] = ab;
                    let hv = ab * h[k] + dx * bt[n];
                    h[k] = hv;
                    acc += ct[n] * hv;
                }
                yt[e] = acc;
            }
            states[row * es..][..es].copy_from_slice(&h);
        }
    }
    let value = Tensor::new(&[bsz, len, width], y)?;
    Ok(x.graph().custom(&[x, delta, a, b, c], value, move |g, sink| {
        let (xd, ddv, ad, bd, cd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data());
        let gd = g.data();
        let mut dx = vec![F::zero(); bsz * len * width];
        let mut ddelta = vec![F::zero(); bsz * len * width];
        let mut da = vec![F::zero(); es];
        let mut db = vec![F::zero(); bsz * len * state];
        let mut dc = vec![F::zero(); bsz * len * state];
        let zero_state = vec![F::zero(); es];
        for bi in 0..bsz {
            let mut dh = vec![F::zero(); es];
            for step in (0..len).rev() {
                let t = order[step];
                let row = bi * len + t;
                let prev: &[F] = if step == 0 {
                    &zero_state
                } else {
                    &states[(bi * len + order[step - 1]) * es..][..es]
                };
                let h = &states[row * es..][..es];
                let dec = &decays[row * es..][..es];
                let xt = &xd[row * width..][..width];
                let dt = &ddv[row * width..][..width];
                let bt = &bd[row * state..][..state];
                let ct = &cd[row * state..][..state];
                let gt = &gd[row * width..][..width];
                for e in 0..width {
                    let (ge, de, xe) = (gt[e], dt[e], xt[e]);
                    let mut dde = F::zero();
                    let mut dxe = F::zero();
                    for n in 0..state {
                        let k = e * state + n;
                        let dhk = dh[k] + ct[n] * ge;
                        dc[row * state + n] += ge * h[k];
                        let dab = dhk * prev[k] * dec[k];
                        dde += dab * ad[k] + dhk * bt[n] * xe;
                        da[k] += dab * de;
                        db[row * state + n] += dhk * de * xe;
                        dxe += dhk * de * bt[n];
                        dh[k] = dhk * dec[k];
                    }
                    ddelta[row * width + e] += dde;
                    dx[row * width + e] += dxe;
                }
            }
        }
        sink.add(0, Tensor::new(&[bsz, len, width], dx).unwrap());
        sink.add(1, Tensor::new(&[bsz, len, width], ddelta).unwrap());
        sink.add(2, Tensor::new(&[width, state], da).unwrap());
        sink.add(3, Tensor::new(&[bsz, len, state], db).unwrap());
        sink.add(4, Tensor::new(&[bsz, len, state], dc).unwrap());
    }))
}

/// Pre-norm bidirectional block with a residual connection:
/// `x + OutProj((scan_fwd(v) + scan_bwd(v)) * silu(g))`, `(v, g) = InProj(LN(x))`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub dim: usize,
    pub inner: usize,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    /// `[dim, 2 * inner]`: value path then gate path.
    pub in_proj: ParamId,
    pub forward: SsmParams,
    pub backward: SsmParams,
    /// `[inner, dim]`
    pub out_proj: ParamId,
}

impl MambaBlock {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        dim: usize,
        inner: usize,
        state: usize,
        rng: &mut RngStream,
    ) -> Self {
        let (norm_gain, norm_bias) = store.add_norm(&format!("{prefix}.norm"), dim);
        let in_proj = store.add_linear(format!("{prefix}.in_proj"), dim, 2 * inner, rng);
        let forward = SsmParams::init(store, &format!("{prefix}.fwd"), inner, state, rng);
        let backward = SsmParams::init(store, &format!("{prefix}.bwd"), inner, state, rng);
        let out_proj = store.add_linear(format!("{prefix}.out_proj"), inner, dim, rng);
        Self {
            dim,
            inner,
            norm_gain,
            norm_bias,
            in_proj,
            forward,
            backward,
            out_proj,
        }
    }

    pub fn forward<'g, F: Real>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "mamba_block",
                lhs: shape,
                rhs: vec![0, 0, self.dim],
            });
        }
        let normed = x.layer_norm(2, p[self.norm_gain], p[self.norm_bias], NORM_EPS)?;
        let proj = normed.matmul(p[self.in_proj])?;
        let v = proj.narrow(2, 0, self.inner)?;
        let gate = proj.narrow(2, self.inner, self.inner)?;
        let mixed = self.scan_sum(p, v)?;
        let branch = mixed.mul(gate.silu())?.matmul(p[self.out_proj])?;
        x.add(branch)
    }

    /// `scan_fwd(v) + scan_bwd(v)`.
    pub fn scan_sum<'g, F: Real>(&self, p: &Bound<'g, F>, v: Var<'g, F>) -> Result<Var<'g, F>> {
        let f = selective_scan(v, &self.forward, p, Direction::Forward)?;
        let b = selective_scan(v, &self.backward, p, Direction::Backward)?;
        f.add(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn setup(width: usize, state: usize, seed: u64) -> (ParamStore<f64>, SsmParams) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, 0);
        let ssm = SsmParams::init(&mut store, "s", width, state, &mut rng);
        (store, ssm)
    }

    #[test]
    fn zero_input_zero_skip_gives_zero() {
        let (mut store, ssm) = setup(4, 3, 1);
        *store.get_mut(ssm.d) = Tensor::zeros(&[4]);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::zeros(&[2, 5, 4]));
        let y = selective_scan(x, &ssm, &p, Direction::Forward).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        let (store, ssm) = setup(3, 2, 2);
        let xs = [0.3, -0.7, 1.1];
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::from_f64(&[1, 1, 3], &xs).unwrap());
        let y = selective_scan(x, &ssm, &p, Direction::Forward).unwrap().value();
        // y = C·(Δ·B·x) + d·x evaluated by hand
        let (wd, bdl, wb, wc, d) = (
            store.get(ssm.w_delta),
            store.get(ssm.b_delta),
            store.get(ssm.w_b),
            store.get(ssm.w_c),
            store.get(ssm.d),
        );
        for e in 0..3 {
            let pre: f64 = (0..3).map(|i| xs[i] * wd.at(&[i, e])).sum::<f64>() + bdl.data()[e];
            let delta = (1.0 + pre.exp()).ln();
            let mut y_ref = d.data()[e] * xs[e];
            for n in 0..2 {
                let b: f64 = (0..3).map(|i| xs[i] * wb.at(&[i, n])).sum();
                let c: f64 = (0..3).map(|i| xs[i] * wc.at(&[i, n])).sum();
                y_ref += c * delta * b * xs[e];
            }
            assert!((y.data()[e] - y_ref).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_direction_is_reversed_forward() {
        let (store, ssm) = setup(4, 3, 3);
        let mut rng = RngStream::new(11, 0);
        let (b, l, e) = (2, 6, 4);
        let x = Tensor::from_fn(&[b, l, e], |_| rng.normal());
        let mut rev = Tensor::zeros(&[b, l, e]);
        for bi in 0..b {
            for t in 0..l {
                for c in 0..e {
                    rev.data_mut()[(bi * l + t) * e + c] = x.at(&[bi, l - 1 - t, c]);
                }
            }
        }
        let g = Graph::new();
        let p = store.bind(&g);
        let yb = selective_scan(g.constant(x), &ssm, &p, Direction::Backward).unwrap().value();
        let yf = selective_scan(g.constant(rev), &ssm, &p, Direction::Forward).unwrap().value();
        for bi in 0..b {
            for t in 0..l {
                for c in 0..e {
                    let a = yb.at(&[bi, t, c]);
                    let r = yf.at(&[bi, l - 1 - t, c]);
                    assert!((a - r).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let (store, ssm) = setup(2, 2, 4);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::<f64>::zeros(&[1, 0, 2]));
        assert!(selective_scan(x, &ssm, &p, Direction::Forward).is_err());
    }

    #[test]
    fn zero_out_proj_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(5, 0);
        let block = MambaBlock::init(&mut store, "b", 6, 6, 4, &mut rng);
        *store.get_mut(block.out_proj) = Tensor::zeros(&[6, 6]);
        let x = Tensor::from_fn(&[2, 5, 6], |_| rng.normal());
        let g = Graph::new();
        let p = store.bind(&g);
        let y = block.forward(&p, g.constant(x.clone())).unwrap().value();
        assert_eq!(*y, x);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(5, 0);
        let block = MambaBlock::init(&mut store, "b", 6, 6, 4, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::zeros(&[1, 3, 5]));
        assert!(block.forward(&p, x).is_err());
    }
}
