use super::{Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics observed in training mode. `var` is the
/// unbiased estimate used for the running average.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn channel_slices(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, rest @ ..] => Ok((*n, *c, rest.iter().product())),
        _ => shape_err(format!("batch norm expects [N, C, ...], got {shape:?}")),
    }
}

/// Batch normalization on `[N, C, H, W]`. With `running = None` the batch
/// statistics are used (training mode); otherwise the given mean/variance.
pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>, Option<BatchStats<T>>)> {
    let (n, c, plane) = channel_slices(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(format!(
            "batch norm over {c} channels got gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let count = n * plane;
    let (mean, var, stats) = match running {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return shape_err("running statistics length mismatch");
            }
            (m.to_vec(), v.to_vec(), None)
        }
        None => {
            if count <= 1 {
                return Err(Error::DegenerateVariance);
            }
            let cnt = T::from_usize(count).expect("count");
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let it = (0..n).flat_map(|b| {
                    let off = (b * c + ch) * plane;
                    x.data()[off..off + plane].iter().copied()
                });
                let m = it.clone().sum::<T>() / cnt;
                let v = it.map(|v| (v - m) * (v - m)).sum::<T>() / cnt;
                mean[ch] = m;
                var[ch] = v;
            }
            let unbiased = var.iter().map(|&v| v * cnt / (cnt - T::one())).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let ch = i % c;
        let (g, b, m, s) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s * g + b);
    }
    Ok((out, mean, inv_std, stats))
}

/// Normalization over the last axis followed by a per-feature affine map.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let Some(&c) = x.shape().last() else {
        return shape_err("layer norm on a rank-0 tensor");
    };
    if c == 0 {
        return shape_err("layer norm over zero features");
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(format!(
            "layer norm over {c} features got gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let cn = T::from_usize(c).expect("count");
    let mut out = x.clone();
    let mut inv_stds = Vec::with_capacity(x.numel() / c);
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().sum::<T>() / cn;
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / cn;
        let s = T::one() / (v + eps).sqrt();
        for (a, (&g, &b)) in row.iter_mut().zip(gamma.data().iter().zip(beta.data())) {
            *a = (*a - m) * s * g + b;
        }
        inv_stds.push(s);
    }
    Ok((out, inv_stds))
}

/// Adjoint of standardization over groups of `m` values sharing one mean and
/// inverse standard deviation: `dx = s/m · (m·dxh − Σdxh − xh·Σ(dxh·xh))`.
fn standardize_backward<T: Scalar>(xh: &[T], dxh: &[T], s: T, dx: &mut [T]) {
    let m = T::from_usize(xh.len()).expect("count");
    let sum_d: T = dxh.iter().copied().sum();
    let sum_dx: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
    for ((o, &d), &h) in dx.iter_mut().zip(dxh).zip(xh) {
        *o = s / m * (m * d - sum_d - h * sum_dx);
    }
}

/// Batch-norm mode for a single call.
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics; the caller receives them for the running update.
    Train,
    /// Normalize with the given running mean and variance.
    Eval(&'a [T], &'a [T]),
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mode: BnMode<'_, T>,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        let xv = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let training = matches!(mode, BnMode::Train);
        let running = match mode {
            BnMode::Train => None,
            BnMode::Eval(m, v) => Some((m, v)),
        };
        let (y, mean, inv_std, stats) = batch_norm_forward(&xv, &gv, &bv, running)?;
        let (n, c, plane) = channel_slices(xv.shape())?;
        let var = self.tape.record(y, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let xd = xv.data();
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut xh = Vec::with_capacity(n * plane);
            let mut dxh = Vec::with_capacity(n * plane);
            let mut dxc = vec![T::zero(); n * plane];
            for ch in 0..c {
                xh.clear();
                dxh.clear();
                let (m, s, gm) = (mean[ch], inv_std[ch], gv.data()[ch]);
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        let h = (xd[i] - m) * s;
                        xh.push(h);
                        dxh.push(gd[i] * gm);
                        dgamma[ch] += gd[i] * h;
                        dbeta[ch] += gd[i];
                    }
                }
                if training {
                    standardize_backward(&xh, &dxh, s, &mut dxc);
                } else {
                    dxc.iter_mut().zip(&dxh).for_each(|(o, &d)| *o = d * s);
                }
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    dx[off..off + plane].copy_from_slice(&dxc[b * plane..(b + 1) * plane]);
                }
            }
            vec![
                need[0].then(|| Tensor::new(xv.shape().to_vec(), dx).expect("shape")),
                need[1].then(|| Tensor::new([c], dgamma.clone()).expect("shape")),
                need[2].then(|| Tensor::new([c], dbeta.clone()).expect("shape")),
            ]
        });
        Ok((var, stats))
    }

    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let (y, inv_stds) = layer_norm_forward(&xv, &gv, &bv)?;
        let c = gv.numel();
        Ok(self.tape.record(y, &[self, gamma, beta], move |g, need| {
            let cn = T::from_usize(c).expect("count");
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut xh = vec![T::zero(); c];
            let mut dxh = vec![T::zero(); c];
            for (r, (row, grow)) in xv.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                let m = row.iter().copied().sum::<T>() / cn;
                let s = inv_stds[r];
                for j in 0..c {
                    xh[j] = (row[j] - m) * s;
                    dxh[j] = grow[j] * gv.data()[j];
                    dgamma[j] += grow[j] * xh[j];
                    dbeta[j] += grow[j];
                }
                standardize_backward(&xh, &dxh, s, &mut dx[r * c..(r + 1) * c]);
            }
            vec![
                need[0].then(|| Tensor::new(xv.shape().to_vec(), dx).expect("shape")),
                need[1].then(|| Tensor::new([c], dgamma.clone()).expect("shape")),
                need[2].then(|| Tensor::new([c], dbeta.clone()).expect("shape")),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channels_map_to_beta() {
        let mut x = Tensor::<f64>::zeros([2, 2, 2, 2]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = if (i / 4) % 2 == 0 { 3.0 } else { -7.0 };
        }
        let gamma = Tensor::from_f64([2], &[2.0, 0.5]).unwrap();
        let beta = Tensor::from_f64([2], &[0.25, -1.0]).unwrap();
        let (y, ..) = batch_norm_forward(&x, &gamma, &beta, None).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let expect = if (i / 4) % 2 == 0 { 0.25 } else { -1.0 };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn eval_with_unit_running_stats_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 3, 2, 2], 1.0, &mut rng);
        let (y, ..) = batch_norm_forward(
            &x,
            &Tensor::ones([3]),
            &Tensor::zeros([3]),
            Some((&[0.0; 3], &[1.0; 3])),
        )
        .unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a * scale - b).abs() < 1e-15);
        }
    }

    #[test]
    fn training_mode_output_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([2, 3, 4, 4], 2.0, &mut rng);
        let gamma = Tensor::from_f64([3], &[1.5, 0.5, 2.0]).unwrap();
        let beta = Tensor::from_f64([3], &[0.1, -0.2, 0.3]).unwrap();
        let (y, ..) = batch_norm_forward(&x, &gamma, &beta, None).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| (0..16).map(move |i| (b, i)))
                .map(|(b, i)| y.data()[(b * 3 + c) * 16 + i])
                .collect();
            let m = vals.iter().sum::<f64>() / 32.0;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 32.0).sqrt();
            assert!((m - beta.data()[c]).abs() < 1e-12);
            assert!((sd - gamma.data()[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn single_value_per_channel_rejected_in_training() {
        let x = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let r = batch_norm_forward(&x, &Tensor::ones([2]), &Tensor::zeros([2]), None);
        assert!(matches!(r, Err(Error::DegenerateVariance)));
    }

    #[test]
    fn layer_norm_cases() {
        let gamma = Tensor::<f64>::ones([4]);
        let beta = Tensor::from_f64([4], &[0.5, 1.0, 1.5, 2.0]).unwrap();
        let constant = Tensor::full([1, 4], 3.0);
        let (y, _) = layer_norm_forward(&constant, &gamma, &beta).unwrap();
        assert_eq!(y.data(), beta.data());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([3, 8], 3.0, &mut rng);
        let (y, _) = layer_norm_forward(&x, &Tensor::ones([8]), &Tensor::zeros([8])).unwrap();
        for row in y.data().chunks(8) {
            let m = row.iter().sum::<f64>() / 8.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }

        let single = Tensor::<f64>::randn([5, 1], 1.0, &mut rng);
        let (y, _) =
            layer_norm_forward(&single, &Tensor::ones([1]), &Tensor::full([1], 0.7)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));

        assert!(layer_norm_forward(
            &Tensor::<f64>::zeros([3, 0]),
            &Tensor::zeros([0]),
            &Tensor::zeros([0])
        )
        .is_err());
    }

    #[test]
    fn norm_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([2, 3, 3, 3], 1.0, &mut rng);
        let gamma = Tensor::<f64>::randn([3], 1.0, &mut rng);
        let beta = Tensor::<f64>::randn([3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([2, 3, 3, 3], 1.0, &mut rng);
        for training in [true, false] {
            let (g, b, w) = (gamma.clone(), beta.clone(), w.clone());
            let err = grad_check(
                move |t, x| {
                    let mode = if training {
                        BnMode::Train
                    } else {
                        BnMode::Eval(&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])
                    };
                    let (y, _) =
                        x.batch_norm(t.constant(g.clone()), t.constant(b.clone()), mode)?;
                    Ok(y.mul(t.constant(w.clone()))?.sigmoid().sum())
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-7, "training={training}: {err}");
        }
        let seq = Tensor::<f64>::randn([4, 5], 1.0, &mut rng);
        let lg = Tensor::<f64>::randn([5], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn([4, 5], 1.0, &mut rng);
        let seq2 = seq.clone();
        let err = grad_check(
            move |t, x| {
                let y = x.layer_norm(t.constant(lg.clone()), t.constant(Tensor::zeros([5])))?;
                Ok(y.mul(t.constant(wt.clone()))?.sigmoid().sum())
            },
            &seq2,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7);
        let err = grad_check(
            move |t, g| {
                let y = t
                    .constant(seq.clone())
                    .layer_norm(g, t.constant(Tensor::zeros([5])))?;
                Ok(y.square().sum())
            },
            &Tensor::ones([5]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7);
    }
}
