//! Bidirectional WKV aggregation and the spatial/channel mixing units.
//!
//! For a sequence of length `T` and channel `c`,
//!
//! ```text
//! wkv[t] = (Σ_{i≠t} e^{-(|t-i|-1)·w/T + k[i]}·v[i] + e^{u + k[t]}·v[t])
//!        / (Σ_{i≠t} e^{-(|t-i|-1)·w/T + k[i]}      + e^{u + k[t]})
//! ```
//!
//! [`bi_wkv_naive`] evaluates this directly in `O(T²)`. [`bi_wkv_scan`] runs a
//! forward and a backward recurrence whose state is kept relative to a running
//! maximum exponent, so it stays finite for any finite keys.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{impl_module, projection, Ctx, LayerNorm, Param};
use crate::tensor::{Scalar, Tensor, Var};

/// Sums of exponentially weighted terms stored as `scale · e^m`.
#[derive(Clone, Copy)]
struct LogAcc<T, const N: usize> {
    m: T,
    s: [T; N],
}

impl<T: Scalar, const N: usize> LogAcc<T, N> {
    fn empty() -> Self {
        Self {
            m: T::neg_infinity(),
            s: [T::zero(); N],
        }
    }

    /// Multiplies every stored sum by `e^{-lambda}`.
    fn decay(&mut self, lambda: T) {
        self.m -= lambda;
    }

    /// Adds `e^e · vals`.
    fn push(&mut self, e: T, vals: [T; N]) {
        if e <= self.m {
            let f = (e - self.m).exp();
            for (s, v) in self.s.iter_mut().zip(vals) {
                *s += f * v;
            }
        } else {
            let f = if self.m == T::neg_infinity() {
                T::zero()
            } else {
                (self.m - e).exp()
            };
            for (s, v) in self.s.iter_mut().zip(vals) {
                *s = *s * f + v;
            }
            self.m = e;
        }
    }

    /// Stored sums expressed relative to `e^base`.
    fn rel(&self, base: T) -> [T; N] {
        if self.m == T::neg_infinity() {
            return [T::zero(); N];
        }
        let f = (self.m - base).exp();
        self.s.map(|s| s * f)
    }
}

struct Geometry {
    batch: usize,
    len: usize,
    channels: usize,
}

fn geometry(k: &[usize], v: &[usize], w: &[usize], u: &[usize]) -> Result<Geometry> {
    if k != v || k.len() < 2 {
        return shape_err(format!(
            "bi_wkv keys {k:?} and values {v:?} must match with rank ≥ 2"
        ));
    }
    let channels = k[k.len() - 1];
    let len = k[k.len() - 2];
    if len == 0 || channels == 0 {
        return shape_err(format!("bi_wkv on empty sequence {k:?}"));
    }
    if w != [channels] || u != [channels] {
        return shape_err(format!(
            "bi_wkv decay {w:?} / bonus {u:?} for {channels} channels"
        ));
    }
    Ok(Geometry {
        batch: k[..k.len() - 2].iter().product(),
        len,
        channels,
    })
}

/// Direct `O(T²)` evaluation over `[.., T, C]` inputs without rescaling.
pub fn bi_wkv_naive<T: Scalar>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: &Tensor<T>,
    u: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = geometry(k.shape(), v.shape(), w.shape(), u.shape())?;
    let (len, ch) = (g.len, g.channels);
    let tn = T::from_usize(len).expect("length");
    let mut out = Tensor::zeros(k.shape().to_vec());
    let (kd, vd) = (k.data(), v.data());
    for b in 0..g.batch {
        let base = b * len * ch;
        for c in 0..ch {
            let (wc, uc) = (w.data()[c], u.data()[c]);
            for t in 0..len {
                let mut num = T::zero();
                let mut den = T::zero();
                for i in 0..len {
                    let idx = base + i * ch + c;
                    let e = if i == t {
                        (uc + kd[idx]).exp()
                    } else {
                        let dist = T::from_usize(t.abs_diff(i) - 1).expect("distance");
                        (-dist / tn * wc + kd[idx]).exp()
                    };
                    num += e * vd[idx];
                    den += e;
                }
                let r = num / den;
                if !num.is_finite() || !den.is_finite() || !r.is_finite() {
                    return Err(Error::Overflow("bi_wkv_naive"));
                }
                out.data_mut()[base + t * ch + c] = r;
            }
        }
    }
    Ok(out)
}

/// Per-channel forward quantities kept for the adjoint.
struct Saved<T> {
    wkv: Vec<T>,
    log_den: Vec<T>,
    /// `∂wkv[t]/∂λ` with `λ = w/T`.
    dlambda: Vec<T>,
}

fn scan_channel<T: Scalar>(k: &[T], v: &[T], w: T, u: T) -> Saved<T> {
    let n = k.len();
    let lambda = w / T::from_usize(n).expect("length");
    // Suffix state for i > t: [Σ a·v, Σ a, Σ d·a·v, Σ d·a] with d = i - t - 1.
    let mut suffix = vec![LogAcc::<T, 4>::empty(); n];
    let mut acc = LogAcc::<T, 4>::empty();
    for t in (0..n).rev() {
        suffix[t] = acc;
        let [a_v, a, _, _] = acc.s;
        acc.s[2] += a_v;
        acc.s[3] += a;
        acc.decay(lambda);
        acc.push(k[t], [v[t], T::one(), T::zero(), T::zero()]);
    }
    let mut saved = Saved {
        wkv: vec![T::zero(); n],
        log_den: vec![T::zero(); n],
        dlambda: vec![T::zero(); n],
    };
    let mut prefix = LogAcc::<T, 4>::empty();
    for t in 0..n {
        let fwd = prefix;
        let bwd = suffix[t];
        let self_e = u + k[t];
        let top = fwd.m.max(bwd.m).max(self_e);
        let f = fwd.rel(top);
        let b = bwd.rel(top);
        let s = (self_e - top).exp();
        let num = f[0] + b[0] + s * v[t];
        let den = f[1] + b[1] + s;
        let wkv = num / den;
        saved.wkv[t] = wkv;
        saved.log_den[t] = top + den.ln();
        saved.dlambda[t] = -((f[2] + b[2]) - wkv * (f[3] + b[3])) / den;

        let [a_v, a, _, _] = prefix.s;
        prefix.s[2] += a_v;
        prefix.s[3] += a;
        prefix.decay(lambda);
        prefix.push(k[t], [v[t], T::one(), T::zero(), T::zero()]);
    }
    saved
}

/// Adjoint of one channel: returns `(dk, dv, dw, du)`.
fn scan_channel_backward<T: Scalar>(
    k: &[T],
    v: &[T],
    w: T,
    u: T,
    saved: &Saved<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, T, T) {
    let n = k.len();
    let tn = T::from_usize(n).expect("length");
    let lambda = w / tn;
    // h[t] = g[t] / S[t] enters with exponent -log S[t]; weights (1, wkv[t]).
    let mut suffix = vec![LogAcc::<T, 2>::empty(); n];
    let mut acc = LogAcc::<T, 2>::empty();
    for t in (0..n).rev() {
        suffix[t] = acc;
        acc.decay(lambda);
        acc.push(-saved.log_den[t], [g[t], g[t] * saved.wkv[t]]);
    }
    let mut dk = vec![T::zero(); n];
    let mut dv = vec![T::zero(); n];
    let mut du = T::zero();
    let mut dw = T::zero();
    let mut prefix = LogAcc::<T, 2>::empty();
    for j in 0..n {
        let cross_f = prefix.rel(-k[j]);
        let cross_b = suffix[j].rel(-k[j]);
        let self_w = (u + k[j] - saved.log_den[j]).exp();
        let h_sum = cross_f[0] + cross_b[0] + self_w * g[j];
        let hw_sum = cross_f[1] + cross_b[1] + self_w * g[j] * saved.wkv[j];
        dv[j] = h_sum;
        dk[j] = v[j] * h_sum - hw_sum;
        du += self_w * g[j] * (v[j] - saved.wkv[j]);
        dw += g[j] * saved.dlambda[j] / tn;

        prefix.decay(lambda);
        prefix.push(-saved.log_den[j], [g[j], g[j] * saved.wkv[j]]);
    }
    (dk, dv, dw, du)
}

fn strided<T: Scalar>(data: &[T], base: usize, len: usize, ch: usize, c: usize) -> Vec<T> {
    (0..len).map(|t| data[base + t * ch + c]).collect()
}

struct ScanOut<T> {
    out: Tensor<T>,
    saved: Vec<Saved<T>>,
}

fn scan_forward<T: Scalar>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: &Tensor<T>,
    u: &Tensor<T>,
) -> Result<ScanOut<T>> {
    let g = geometry(k.shape(), v.shape(), w.shape(), u.shape())?;
    let (len, ch) = (g.len, g.channels);
    let mut out = Tensor::zeros(k.shape().to_vec());
    let mut saved = Vec::with_capacity(g.batch * ch);
    for b in 0..g.batch {
        let base = b * len * ch;
        for c in 0..ch {
            let kc = strided(k.data(), base, len, ch, c);
            let vc = strided(v.data(), base, len, ch, c);
            let s = scan_channel(&kc, &vc, w.data()[c], u.data()[c]);
            for (t, &x) in s.wkv.iter().enumerate() {
                out.data_mut()[base + t * ch + c] = x;
            }
            saved.push(s);
        }
    }
    Ok(ScanOut { out, saved })
}

/// Linear-time evaluation of the bidirectional WKV over `[.., T, C]` inputs.
pub fn bi_wkv_scan<T: Scalar>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: &Tensor<T>,
    u: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(scan_forward(k, v, w, u)?.out)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable [`bi_wkv_scan`] with `self` as the keys.
    pub fn bi_wkv(self, v: Var<'t, T>, w: Var<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        let (kt, vt, wt, ut) = (self.value(), v.value(), w.value(), u.value());
        let ScanOut { out, saved } = scan_forward(&kt, &vt, &wt, &ut)?;
        let shape = kt.shape().to_vec();
        let (len, ch) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        Ok(self.tape.record(out, &[self, v, w, u], move |g, need| {
            let mut dk = Tensor::zeros(shape.clone());
            let mut dv = Tensor::zeros(shape.clone());
            let mut dw = Tensor::zeros([ch]);
            let mut du = Tensor::zeros([ch]);
            for (idx, s) in saved.iter().enumerate() {
                let (b, c) = (idx / ch, idx % ch);
                let base = b * len * ch;
                let kc = strided(kt.data(), base, len, ch, c);
                let vc = strided(vt.data(), base, len, ch, c);
                let gc = strided(g.data(), base, len, ch, c);
                let (dkc, dvc, dwc, duc) =
                    scan_channel_backward(&kc, &vc, wt.data()[c], ut.data()[c], s, &gc);
                for t in 0..len {
                    dk.data_mut()[base + t * ch + c] = dkc[t];
                    dv.data_mut()[base + t * ch + c] = dvc[t];
                }
                dw.data_mut()[c] += dwc;
                du.data_mut()[c] += duc;
            }
            vec![
                need[0].then_some(dk),
                need[1].then_some(dv),
                need[2].then_some(dw),
                need[3].then_some(du),
            ]
        }))
    }
}

/// Parameters of one token-mixing unit.
#[derive(Debug, Clone)]
pub struct SpatialMixParams<T> {
    pub ln: LayerNorm<T>,
    pub w_r: Param<T>,
    pub w_k: Param<T>,
    pub w_v: Param<T>,
    pub w_o: Param<T>,
    /// Per-channel decay `w`.
    pub decay: Param<T>,
    /// Per-channel self bonus `u`.
    pub bonus: Param<T>,
}

impl_module!(SpatialMixParams {
    ln,
    w_r,
    w_k,
    w_v,
    w_o,
    decay,
    bonus
});

impl<T: Scalar> SpatialMixParams<T> {
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln: LayerNorm::new(c),
            w_r: projection(c, c, rng),
            w_k: projection(c, c, rng),
            w_v: projection(c, c, rng),
            w_o: projection(c, c, rng),
            decay: Param::new(Tensor::uniform([c], 0.0, 1.0, rng)),
            bonus: Param::new(Tensor::uniform([c], -0.5, 0.5, rng)),
        }
    }

    pub fn channels(&self) -> usize {
        self.decay.numel()
    }

    /// Multiply-accumulates for a sequence of `tokens`.
    pub fn macs(&self, tokens: usize) -> u64 {
        let c = self.channels() as u64;
        let t = tokens as u64;
        4 * t * c * c + 8 * t * c
    }
}

/// `(sigmoid(R) ⊙ bi_wkv(K, V))·W_O` on the layer-normalized sequence `[.., T, C]`.
pub fn spatial_mix<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    seq: Var<'t, T>,
    p: &SpatialMixParams<T>,
) -> Result<Var<'t, T>> {
    let x = p.ln.forward(ctx, seq)?;
    let r = x.linear(ctx.param(&p.w_r))?;
    let k = x.linear(ctx.param(&p.w_k))?;
    let v = x.linear(ctx.param(&p.w_v))?;
    let wkv = k.bi_wkv(v, ctx.param(&p.decay), ctx.param(&p.bonus))?;
    r.sigmoid().mul(wkv)?.linear(ctx.param(&p.w_o))
}

/// Parameters of the token-local feed-forward unit.
#[derive(Debug, Clone)]
pub struct ChannelMixParams<T> {
    pub ln: LayerNorm<T>,
    pub w_k: Param<T>,
    pub w_v: Param<T>,
    pub w_r: Param<T>,
}

impl_module!(ChannelMixParams { ln, w_k, w_v, w_r });

/// Hidden expansion of the channel-mixing unit.
pub const CHANNEL_MIX_RATIO: usize = 4;

impl<T: Scalar> ChannelMixParams<T> {
    pub fn new(c: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config(
                "channel-mix expansion ratio must be at least 1".into(),
            ));
        }
        Ok(Self {
            ln: LayerNorm::new(c),
            w_k: projection(c, ratio * c, rng),
            w_v: projection(ratio * c, c, rng),
            w_r: projection(c, c, rng),
        })
    }

    pub fn ratio(&self) -> usize {
        self.w_k.value.shape()[1] / self.w_k.value.shape()[0]
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        let c = self.w_k.value.shape()[0] as u64;
        let r = self.ratio() as u64;
        tokens as u64 * (2 * r * c * c + c * c)
    }
}

/// `sigmoid(x·W_R) ⊙ (relu(x·W_K)²·W_V)` on the layer-normalized sequence.
pub fn channel_mix<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    seq: Var<'t, T>,
    p: &ChannelMixParams<T>,
) -> Result<Var<'t, T>> {
    let x = p.ln.forward(ctx, seq)?;
    let k = x.linear(ctx.param(&p.w_k))?.relu().square();
    let r = x.linear(ctx.param(&p.w_r))?.sigmoid();
    r.mul(k.linear(ctx.param(&p.w_v))?)
}
