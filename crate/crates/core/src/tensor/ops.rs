use std::rc::Rc;

use super::{gemm, Scalar, Tensor, Var};
use crate::error::{shape_err, Result};

/// Gather index meaning "zero fill".
pub const PAD: usize = usize::MAX;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Offsets into a broadcast operand of shape `small` for every element of `big`.
/// Both shapes have equal rank; each `small` extent is 1 or equal to `big`'s.
fn broadcast_offsets(big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if big.len() != small.len() || big.iter().zip(small).any(|(&b, &s)| s != 1 && s != b) {
        return shape_err(format!("cannot broadcast {small:?} to {big:?}"));
    }
    let mut strides = vec![0usize; small.len()];
    let mut acc = 1;
    for d in (0..small.len()).rev() {
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let numel: usize = big.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; big.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < big[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(out)
}

fn reduce_to<T: Scalar>(g: &[T], offsets: &[usize], small_shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(small_shape.to_vec());
    let data = out.data_mut();
    for (&v, &o) in g.iter().zip(offsets) {
        data[o] += v;
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let y_rc = Rc::new(y.clone());
        self.tape.record(y, &[self], move |g, _| {
            let data = x
                .data()
                .iter()
                .zip(y_rc.data())
                .zip(g.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(
                Tensor::new(x.shape().to_vec(), data).expect("same shape"),
            )]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn square(self) -> Var<'t, T> {
        let two = T::one() + T::one();
        self.unary(|x| x * x, move |x, _| two * x)
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    fn binary_same(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let y = a.zip_map(&b, f)?;
        Ok(self.tape.record(y, &[self, other], move |g, need| {
            let grad = |h: &dyn Fn(T, T, T) -> T| {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .zip(g.data())
                    .map(|((&a, &b), &g)| h(a, b, g))
                    .collect();
                Tensor::new(a.shape().to_vec(), data).expect("same shape")
            };
            vec![need[0].then(|| grad(&da)), need[1].then(|| grad(&db))]
        }))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same(other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same(other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same(other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    /// `self + other` with `other` broadcast over unit extents.
    pub fn add_bcast(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let offsets = Rc::new(broadcast_offsets(a.shape(), b.shape())?);
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .zip(offsets.iter())
            .map(|(&x, &o)| x + bd[o])
            .collect();
        let y = Tensor::new(a.shape().to_vec(), data)?;
        let b_shape = b.shape().to_vec();
        Ok(self.tape.record(y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| reduce_to(g.data(), &offsets, &b_shape)),
            ]
        }))
    }

    /// `self * other` with `other` broadcast over unit extents.
    pub fn mul_bcast(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let offsets = Rc::new(broadcast_offsets(a.shape(), b.shape())?);
        let data = {
            let bd = b.data();
            a.data()
                .iter()
                .zip(offsets.iter())
                .map(|(&x, &o)| x * bd[o])
                .collect()
        };
        let y = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.record(y, &[self, other], move |g, need| {
            let da = need[0].then(|| {
                let bd = b.data();
                let data = g
                    .data()
                    .iter()
                    .zip(offsets.iter())
                    .map(|(&g, &o)| g * bd[o])
                    .collect();
                Tensor::new(a.shape().to_vec(), data).expect("same shape")
            });
            let db = need[1].then(|| {
                let prod: Vec<T> = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                reduce_to(&prod, &offsets, b.shape())
            });
            vec![da, db]
        }))
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return shape_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
        }
        let y = a.matmul(&b)?;
        Ok(self.tape.record(y, &[self, other], move |g, need| {
            let da = need[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm(false, true, m, n, k, g.data(), b.data(), &mut d, false);
                Tensor::new([m, k], d).expect("shape")
            });
            let db = need[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(true, false, k, m, n, a.data(), g.data(), &mut d, false);
                Tensor::new([k, n], d).expect("shape")
            });
            vec![da, db]
        }))
    }

    /// Token-wise projection `[.., Cin] x [Cin, Cout] -> [.., Cout]`.
    pub fn linear(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut shape = self.shape();
        let Some(&cin) = shape.last() else {
            return shape_err("linear on a rank-0 tensor");
        };
        let ws = w.shape();
        if ws.len() != 2 || ws[0] != cin {
            return shape_err(format!("linear {shape:?} x {ws:?}"));
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let y = self.reshape([rows, cin])?.matmul(w)?;
        *shape.last_mut().expect("nonempty") = ws[1];
        y.reshape(shape)
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .record(Tensor::scalar(x.sum()), &[self], move |g, _| {
                vec![Some(Tensor::full(shape.clone(), g.item()))]
            })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize(self.value().numel()).expect("count");
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.tape.record(y, &[self], move |g, _| {
            vec![Some(g.clone().reshape(old.clone()).expect("same numel"))]
        }))
    }

    /// `out[j] = self[index[j]]`, or zero where `index[j] == PAD`.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != index.len() {
            return shape_err(format!(
                "gather of {} indices into shape {shape:?}",
                index.len()
            ));
        }
        let n = x.numel();
        if let Some(&bad) = index.iter().find(|&&i| i != PAD && i >= n) {
            return shape_err(format!("gather index {bad} out of range for {n} elements"));
        }
        let xd = x.data();
        let data = index
            .iter()
            .map(|&i| if i == PAD { T::zero() } else { xd[i] })
            .collect();
        let y = Tensor::new(shape, data)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(y, &[self], move |g, _| {
            let mut d = Tensor::zeros(in_shape.clone());
            let dd = d.data_mut();
            for (&i, &v) in index.iter().zip(g.data()) {
                if i != PAD {
                    dd[i] += v;
                }
            }
            vec![Some(d)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} on rank {}", base.len()));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return shape_err(format!("concat {:?} with {:?} on axis {axis}", base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let y = Tensor::new(shape, data)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.record(y, parts, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            let mut out = Vec::with_capacity(shapes.len());
            for ((s, &w), &needed) in shapes.iter().zip(&widths).zip(need) {
                if needed {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let start = o * total + offset;
                        d.extend_from_slice(&gd[start..start + w]);
                    }
                    out.push(Some(Tensor::new(s.clone(), d).expect("shape")));
                } else {
                    out.push(None);
                }
                offset += w;
            }
            out
        }))
    }

    /// Mean over the two trailing spatial axes of `[N, C, H, W]`, keeping them as unit extents.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).expect("count");
        let data = x
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::new([n, c, 1, 1], data)?;
        Ok(self.tape.record(y, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                .collect();
            vec![Some(Tensor::new([n, c, h, w], data).expect("shape"))]
        }))
    }

    /// Mean binary cross-entropy of logits against a {0,1} target of equal shape.
    pub fn bce_with_logits(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape() != target.shape() {
            return shape_err(format!(
                "bce logits {:?} vs target {:?}",
                x.shape(),
                target.shape()
            ));
        }
        let n = T::from_usize(x.numel()).expect("count");
        let loss: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let target = target.clone();
        Ok(self
            .tape
            .record(Tensor::scalar(loss), &[self], move |g, _| {
                let s = g.item() / n;
                let data = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &y)| (sigmoid(z) - y) * s)
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data).expect("shape"))]
            }))
    }

    /// Mean over samples of `1 - (2 Σ p y + 1) / (Σ p + Σ y + 1)` with `p = sigmoid(logits)`.
    /// The leading axis indexes samples.
    pub fn soft_dice_loss(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape() != target.shape() || x.rank() == 0 {
            return shape_err(format!(
                "dice logits {:?} vs target {:?}",
                x.shape(),
                target.shape()
            ));
        }
        let n = x.shape()[0];
        let per = x.numel() / n.max(1);
        let smooth = T::one();
        let two = T::one() + T::one();
        let probs: Vec<T> = x.data().iter().map(|&z| sigmoid(z)).collect();
        let mut stats = Vec::with_capacity(n);
        let mut loss = T::zero();
        for s in 0..n {
            let p = &probs[s * per..(s + 1) * per];
            let y = &target.data()[s * per..(s + 1) * per];
            let inter: T = p.iter().zip(y).map(|(&a, &b)| a * b).sum();
            let den = p.iter().copied().sum::<T>() + y.iter().copied().sum::<T>() + smooth;
            let num = two * inter + smooth;
            loss += T::one() - num / den;
            stats.push((num, den));
        }
        let nt = T::from_usize(n).expect("count");
        let target = target.clone();
        Ok(self
            .tape
            .record(Tensor::scalar(loss / nt), &[self], move |g, _| {
                let scale = g.item() / nt;
                let mut data = vec![T::zero(); probs.len()];
                for (s, &(num, den)) in stats.iter().enumerate() {
                    for j in s * per..(s + 1) * per {
                        let p = probs[j];
                        // d(num/den)/dp = (2y·den − num) / den²
                        let dratio = (two * target.data()[j] * den - num) / (den * den);
                        data[j] = -scale * dratio * p * (T::one() - p);
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data).expect("shape"))]
            }))
    }
}
