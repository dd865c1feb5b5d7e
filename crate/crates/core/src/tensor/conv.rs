use rayon::prelude::*;

use super::{gemm, Scalar, Tensor, Var};
use crate::error::{shape_err, Result};

/// Stride, padding, dilation and grouping of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// Sliding-window geometry between an image of `h x w` and a grid of `oh x ow`
/// window positions.
#[derive(Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    /// Fills `col` (`channels*kh*kw` rows by `oh*ow` columns) from `img`
    /// (`channels` planes of `h*w`).
    fn im2col<T: Scalar>(&self, img: &[T], channels: usize, col: &mut [T]) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        for c in 0..channels {
            let plane = &img[c * hw..(c + 1) * hw];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * ohw;
                    let dst = &mut col[row..row + ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i * self.dil) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy as usize >= self.h {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j * self.dil) as isize - self.pad as isize;
                            *v = if ix < 0 || ix as usize >= self.w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: scatters-adds `col` back onto `img`.
    fn col2im<T: Scalar>(&self, col: &[T], channels: usize, img: &mut [T]) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        for c in 0..channels {
            let plane = &mut img[c * hw..(c + 1) * hw];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * ohw;
                    let src = &col[row..row + ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i * self.dil) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in src[oy * self.ow..(oy + 1) * self.ow].iter().enumerate() {
                            let ix = (ox * self.stride + j * self.dil) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvShape {
    n: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    geom: Geom,
}

impl ConvShape {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn krows(&self) -> usize {
        self.cin_g() * self.geom.kh * self.geom.kw
    }
}

fn conv_shape(
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
    spec: Conv2dSpec,
) -> Result<ConvShape> {
    let [n, cin, h, wd] = x[..] else {
        return shape_err(format!("conv2d input must be [N, C, H, W], got {x:?}"));
    };
    let [cout, cin_g, kh, kw] = w[..] else {
        return shape_err(format!(
            "conv2d weight must be [Cout, Cin/groups, kh, kw], got {w:?}"
        ));
    };
    let Conv2dSpec {
        stride,
        padding,
        dilation,
        groups,
    } = spec;
    if stride == 0 || dilation == 0 || groups == 0 {
        return shape_err("conv2d stride, dilation and groups must be positive");
    }
    if cin % groups != 0 || cout % groups != 0 {
        return shape_err(format!(
            "conv2d channels (in {cin}, out {cout}) not divisible by groups {groups}"
        ));
    }
    if cin / groups != cin_g {
        return shape_err(format!(
            "conv2d weight expects {cin_g} input channels per group, input has {cin} over {groups} groups"
        ));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return shape_err(format!("conv2d bias must be [{cout}], got {b:?}"));
        }
    }
    let span_h = dilation * (kh - 1) + 1;
    let span_w = dilation * (kw - 1) + 1;
    if h + 2 * padding < span_h || wd + 2 * padding < span_w || kh == 0 || kw == 0 {
        return shape_err(format!(
            "conv2d kernel {kh}x{kw} (dilation {dilation}) does not fit padded input {h}x{wd} (padding {padding}): zero-size output"
        ));
    }
    let oh = (h + 2 * padding - span_h) / stride + 1;
    let ow = (wd + 2 * padding - span_w) / stride + 1;
    Ok(ConvShape {
        n,
        cin,
        cout,
        groups,
        geom: Geom {
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            dil: dilation,
            oh,
            ow,
        },
    })
}

/// Cross-correlation of `x: [N, Cin, H, W]` with `w: [Cout, Cin/groups, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let s = conv_shape(x.shape(), w.shape(), bias.map(|b| b.shape()), spec)?;
    let g = s.geom;
    let (in_sz, out_sz, ohw) = (s.cin * g.h * g.w, s.cout * g.oh * g.ow, g.oh * g.ow);
    let mut out = vec![T::zero(); s.n * out_sz];
    out.par_chunks_mut(out_sz.max(1))
        .enumerate()
        .for_each(|(n, y)| {
            let img = &x.data()[n * in_sz..(n + 1) * in_sz];
            let mut col = vec![T::zero(); s.krows() * ohw];
            for grp in 0..s.groups {
                let c0 = grp * s.cin_g();
                g.im2col(&img[c0 * g.h * g.w..], s.cin_g(), &mut col);
                let wg = &w.data()[grp * s.cout_g() * s.krows()..];
                let yg = &mut y[grp * s.cout_g() * ohw..(grp + 1) * s.cout_g() * ohw];
                gemm(
                    false,
                    false,
                    s.cout_g(),
                    s.krows(),
                    ohw,
                    wg,
                    &col,
                    yg,
                    false,
                );
            }
            if let Some(b) = bias {
                for (plane, &bv) in y.chunks_mut(ohw).zip(b.data()) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Tensor::new([s.n, s.cout, g.oh, g.ow], out)
}

fn conv2d_backward<T: Scalar>(
    s: &ConvShape,
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = s.geom;
    let (in_sz, out_sz, ohw) = (s.cin * g.h * g.w, s.cout * g.oh * g.ow, g.oh * g.ow);
    let w_len = w.numel();
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let img = &x.data()[n * in_sz..(n + 1) * in_sz];
            let gys = &gy.data()[n * out_sz..(n + 1) * out_sz];
            let mut dx = if need_x {
                vec![T::zero(); in_sz]
            } else {
                vec![]
            };
            let mut dw = if need_w {
                vec![T::zero(); w_len]
            } else {
                vec![]
            };
            let mut col = vec![T::zero(); s.krows() * ohw];
            for grp in 0..s.groups {
                let gyg = &gys[grp * s.cout_g() * ohw..(grp + 1) * s.cout_g() * ohw];
                let woff = grp * s.cout_g() * s.krows();
                if need_w {
                    let c0 = grp * s.cin_g();
                    g.im2col(&img[c0 * g.h * g.w..], s.cin_g(), &mut col);
                    let dwg = &mut dw[woff..woff + s.cout_g() * s.krows()];
                    gemm(
                        false,
                        true,
                        s.cout_g(),
                        ohw,
                        s.krows(),
                        gyg,
                        &col,
                        dwg,
                        false,
                    );
                }
                if need_x {
                    let wg = &w.data()[woff..woff + s.cout_g() * s.krows()];
                    gemm(
                        true,
                        false,
                        s.krows(),
                        s.cout_g(),
                        ohw,
                        wg,
                        gyg,
                        &mut col,
                        false,
                    );
                    let c0 = grp * s.cin_g();
                    g.col2im(
                        &col,
                        s.cin_g(),
                        &mut dx[c0 * g.h * g.w..(c0 + s.cin_g()) * g.h * g.w],
                    );
                }
            }
            (dx, dw)
        })
        .collect();
    let dx = need_x.then(|| {
        let data = per_sample
            .iter()
            .flat_map(|(dx, _)| dx.iter().copied())
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape")
    });
    let dw = need_w.then(|| {
        let mut acc = vec![T::zero(); w_len];
        for (_, dw) in &per_sample {
            acc.iter_mut().zip(dw).for_each(|(a, &b)| *a += b);
        }
        Tensor::new(w.shape().to_vec(), acc).expect("shape")
    });
    (dx, dw)
}

fn bias_grad<T: Scalar>(gy: &Tensor<T>, channels: usize) -> Tensor<T> {
    let shape = gy.shape();
    let plane: usize = shape[2..].iter().product();
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in gy.data().chunks(plane.max(1)).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::new([channels], db).expect("shape")
}

fn transpose_shape(
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
    padding: usize,
) -> Result<ConvShape> {
    let [n, cin, h, wd] = x[..] else {
        return shape_err(format!(
            "conv_transpose2d input must be [N, C, H, W], got {x:?}"
        ));
    };
    let [wcin, cout, kh, kw] = w[..] else {
        return shape_err(format!(
            "conv_transpose2d weight must be [Cin, Cout, kh, kw], got {w:?}"
        ));
    };
    if wcin != cin {
        return shape_err(format!(
            "conv_transpose2d weight expects {wcin} input channels, got {cin}"
        ));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return shape_err(format!("conv_transpose2d bias must be [{cout}], got {b:?}"));
        }
    }
    if stride == 0 || kh == 0 || kw == 0 || h == 0 || wd == 0 {
        return shape_err("conv_transpose2d stride, kernel and input extents must be positive");
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (wd - 1) * stride + kw;
    if full_h <= 2 * padding || full_w <= 2 * padding {
        return shape_err("conv_transpose2d padding removes the whole output: zero-size output");
    }
    // The image side of the geometry is the transposed-conv output.
    Ok(ConvShape {
        n,
        cin: cout,
        cout: cin,
        groups: 1,
        geom: Geom {
            h: full_h - 2 * padding,
            w: full_w - 2 * padding,
            kh,
            kw,
            stride,
            pad: padding,
            dil: 1,
            oh: h,
            ow: wd,
        },
    })
}

/// Transposed convolution of `x: [N, Cin, H, W]` with `w: [Cin, Cout, kh, kw]`.
/// Output extent is `(H − 1)·stride − 2·padding + kh`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let s = transpose_shape(
        x.shape(),
        w.shape(),
        bias.map(|b| b.shape()),
        stride,
        padding,
    )?;
    // In `s`, cin/cout are the image/grid channel counts: image = output.
    let (out_c, in_c) = (s.cin, s.cout);
    let g = s.geom;
    let (ohw, img_sz) = (g.oh * g.ow, out_c * g.h * g.w);
    let krows = out_c * g.kh * g.kw;
    let mut out = vec![T::zero(); s.n * img_sz];
    out.par_chunks_mut(img_sz).enumerate().for_each(|(n, y)| {
        let xs = &x.data()[n * in_c * ohw..(n + 1) * in_c * ohw];
        let mut col = vec![T::zero(); krows * ohw];
        gemm(true, false, krows, in_c, ohw, w.data(), xs, &mut col, false);
        g.col2im(&col, out_c, y);
        if let Some(b) = bias {
            for (plane, &bv) in y.chunks_mut(g.h * g.w).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::new([s.n, out_c, g.h, g.w], out)
}

fn conv_transpose2d_backward<T: Scalar>(
    s: &ConvShape,
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (out_c, in_c) = (s.cin, s.cout);
    let g = s.geom;
    let (ohw, img_sz) = (g.oh * g.ow, out_c * g.h * g.w);
    let krows = out_c * g.kh * g.kw;
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let gys = &gy.data()[n * img_sz..(n + 1) * img_sz];
            let xs = &x.data()[n * in_c * ohw..(n + 1) * in_c * ohw];
            let mut col = vec![T::zero(); krows * ohw];
            g.im2col(gys, out_c, &mut col);
            let mut dx = vec![];
            if need_x {
                dx = vec![T::zero(); in_c * ohw];
                gemm(
                    false,
                    false,
                    in_c,
                    krows,
                    ohw,
                    w.data(),
                    &col,
                    &mut dx,
                    false,
                );
            }
            let mut dw = vec![];
            if need_w {
                dw = vec![T::zero(); in_c * krows];
                gemm(false, true, in_c, ohw, krows, xs, &col, &mut dw, false);
            }
            (dx, dw)
        })
        .collect();
    let dx = need_x.then(|| {
        let data = per_sample
            .iter()
            .flat_map(|(dx, _)| dx.iter().copied())
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape")
    });
    let dw = need_w.then(|| {
        let mut acc = vec![T::zero(); w.numel()];
        for (_, dw) in &per_sample {
            acc.iter_mut().zip(dw).for_each(|(a, &b)| *a += b);
        }
        Tensor::new(w.shape().to_vec(), acc).expect("shape")
    });
    (dx, dw)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn conv2d(
        self,
        w: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        spec: Conv2dSpec,
    ) -> Result<Var<'t, T>> {
        let (xv, wv) = (self.value(), w.value());
        let bv = bias.map(|b| b.value());
        let s = conv_shape(xv.shape(), wv.shape(), bv.as_ref().map(|b| b.shape()), spec)?;
        let y = conv2d(&xv, &wv, bv.as_deref(), spec)?;
        let mut parents = vec![self, w];
        parents.extend(bias);
        Ok(self.tape.record(y, &parents, move |gy, need| {
            let (dx, dw) = conv2d_backward(&s, &xv, &wv, gy, need[0], need[1]);
            let mut out = vec![dx, dw];
            if need.len() == 3 {
                out.push(need[2].then(|| bias_grad(gy, s.cout)));
            }
            out
        }))
    }

    pub fn conv_transpose2d(
        self,
        w: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let (xv, wv) = (self.value(), w.value());
        let bv = bias.map(|b| b.value());
        let s = transpose_shape(
            xv.shape(),
            wv.shape(),
            bv.as_ref().map(|b| b.shape()),
            stride,
            padding,
        )?;
        let y = conv_transpose2d(&xv, &wv, bv.as_deref(), stride, padding)?;
        let mut parents = vec![self, w];
        parents.extend(bias);
        Ok(self.tape.record(y, &parents, move |gy, need| {
            let (dx, dw) = conv_transpose2d_backward(&s, &xv, &wv, gy, need[0], need[1]);
            let mut out = vec![dx, dw];
            if need.len() == 3 {
                out.push(need[2].then(|| bias_grad(gy, s.cin)));
            }
            out
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    /// Direct six-loop cross-correlation, independent of im2col.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, cin_g, kh, kw) = w.dims4().unwrap();
        let Conv2dSpec {
            stride,
            padding,
            dilation,
            groups,
        } = spec;
        let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
        let ow = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
        let cout_g = cout / groups;
        let mut y = Tensor::zeros([n, cout, oh, ow]);
        for b in 0..n {
            for o in 0..cout {
                let grp = o / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy =
                                        (oy * stride + i * dilation) as isize - padding as isize;
                                    let ix =
                                        (ox * stride + j * dilation) as isize - padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += w.at(&[o, ci, i, j])
                                            * x.at(&[
                                                b,
                                                grp * cin_g + ci,
                                                iy as usize,
                                                ix as usize,
                                            ]);
                                    }
                                }
                            }
                        }
                        y.set(&[b, o, oy, ox], acc);
                    }
                }
            }
        }
        let _ = cin;
        y
    }

    #[test]
    fn pointwise_scaling() {
        let x = Tensor::<f64>::ones([1, 1, 3, 3]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_input_exposes_bias() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f64>::ones([1, 2, 3, 3]);
        let b = t(&[1], &[5.0]);
        let y = conv2d(&x, &w, Some(&b), Conv2dSpec::default().padding(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn hand_sum_of_nine() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = Tensor::<f64>::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (
                Conv2dSpec::default().stride(2).padding(1),
                [2, 4, 7, 6],
                [6, 4, 3, 3],
            ),
            (
                Conv2dSpec::default().padding(2).dilation(2).groups(4),
                [1, 4, 5, 5],
                [4, 1, 3, 3],
            ),
            (Conv2dSpec::default().groups(2), [2, 4, 3, 3], [6, 2, 1, 1]),
        ];
        for (spec, xs, ws) in cases {
            let x = Tensor::randn(xs, 1.0, &mut rng);
            let w = Tensor::randn(ws, 1.0, &mut rng);
            let fast = conv2d(&x, &w, None, spec).unwrap();
            let slow = naive_conv(&x, &w, spec);
            assert_eq!(fast.shape(), slow.shape());
            let err = fast.zip_map(&slow, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-12, "{spec:?}: {err}");
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros([2, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, Conv2dSpec::default().groups(2)).is_err());
        let big = Tensor::<f64>::zeros([2, 3, 5, 5]);
        assert!(conv2d(&x, &big, None, Conv2dSpec::default()).is_err());
        let wrong_cin = Tensor::<f64>::zeros([2, 2, 1, 1]);
        assert!(conv2d(&x, &wrong_cin, None, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn transpose_single_pixel_broadcast() {
        let x = t(&[1, 1, 1, 1], &[1.0]);
        let w = Tensor::<f64>::ones([1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
        let b = t(&[1], &[-1.5]);
        let z = conv_transpose2d(&Tensor::zeros([1, 1, 3, 3]), &w, Some(&b), 2, 0).unwrap();
        assert_eq!(z.shape(), &[1, 1, 6, 6]);
        assert!(z.data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> = <x, convT(y)> with the same weight.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([1, 1, 4, 4], 1.0, &mut rng);
        let y = Tensor::<f64>::randn([1, 1, 2, 2], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([1, 1, 2, 2], 1.0, &mut rng);
        let cx = conv2d(&x, &w, None, Conv2dSpec::default().stride(2)).unwrap();
        let ty = conv_transpose2d(&y, &w, None, 2, 0).unwrap();
        assert_eq!(ty.shape(), &[1, 1, 4, 4]);
        let lhs = cx.dot(&y);
        let rhs = x.dot(&ty);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        // Block tiling: each input pixel stamps the kernel into its own 2x2 block.
        let ones = Tensor::<f64>::ones([1, 1, 2, 2]);
        let tiled = conv_transpose2d(&ones, &w, None, 2, 0).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(
                            tiled.at(&[0, 0, by * 2 + i, bx * 2 + j]),
                            w.at(&[0, 0, i, j])
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_inner_product_multichannel_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (cin, cout) = (3, 2);
        let x = Tensor::<f64>::randn([2, cin, 5, 5], 1.0, &mut rng);
        let w_conv = Tensor::<f64>::randn([cout, cin, 3, 3], 1.0, &mut rng);
        let cx = conv2d(
            &x,
            &w_conv,
            None,
            Conv2dSpec::default().stride(2).padding(1),
        )
        .unwrap();
        let y = Tensor::<f64>::randn(cx.shape().to_vec(), 1.0, &mut rng);
        // convT weight layout is [Cin_T = cout, Cout_T = cin, kh, kw], i.e. the same buffer.
        let wt = w_conv.clone().reshape([cout, cin, 3, 3]).unwrap();
        let ty = conv_transpose2d(&y, &wt, None, 2, 1).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let (lhs, rhs) = (cx.dot(&y), x.dot(&ty));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::<f64>::randn([4, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::<f64>::randn([4], 0.5, &mut rng);
        let x = Tensor::<f64>::randn([2, 4, 5, 5], 1.0, &mut rng);
        let spec = Conv2dSpec::default()
            .padding(2)
            .dilation(2)
            .groups(2)
            .stride(2);
        let (w1, b1) = (w.clone(), b.clone());
        assert!(
            grad_check(
                move |t, x| {
                    let y = x.conv2d(t.constant(w1.clone()), Some(t.constant(b1.clone())), spec)?;
                    Ok(y.square().sum())
                },
                &x,
                1e-5
            )
            .unwrap()
                < 1e-7
        );
        let x1 = x.clone();
        assert!(
            grad_check(
                move |t, w| {
                    let y = t
                        .constant(x1.clone())
                        .conv2d(w, Some(t.constant(b.clone())), spec)?;
                    Ok(y.square().sum())
                },
                &w,
                1e-5
            )
            .unwrap()
                < 1e-7
        );
    }

    #[test]
    fn transpose_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::<f64>::randn([3, 2, 2, 2], 0.5, &mut rng);
        let x = Tensor::<f64>::randn([2, 3, 3, 3], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn([2], 0.5, &mut rng);
        let (w1, b1) = (w.clone(), bias.clone());
        assert!(
            grad_check(
                move |t, x| {
                    let y = x.conv_transpose2d(
                        t.constant(w1.clone()),
                        Some(t.constant(b1.clone())),
                        2,
                        0,
                    )?;
                    Ok(y.square().sum())
                },
                &x,
                1e-5
            )
            .unwrap()
                < 1e-7
        );
        assert!(
            grad_check(
                move |t, b| {
                    let y = t.constant(x.clone()).conv_transpose2d(
                        t.constant(w.clone()),
                        Some(b),
                        2,
                        0,
                    )?;
                    Ok(y.square().sum())
                },
                &bias,
                1e-5
            )
            .unwrap()
                < 1e-7
        );
    }
}
