//! Serialization of feature maps into token sequences along four directions.
//!
//! A map `[C, H, W]` (or a batch `[N, C, H, W]`) becomes a sequence `[T, C]`
//! (or `[N, T, C]`) with `T = H·W`. `LR` is row-major, `TB` column-major, and
//! `RL`/`BT` are their reversals.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor, Var, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScanDirection {
    LR,
    RL,
    TB,
    BT,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [Self::LR, Self::RL, Self::TB, Self::BT];

    /// Pixel `(row, col)` visited at token `t` on an `h x w` grid.
    pub fn pixel(self, t: usize, h: usize, w: usize) -> (usize, usize) {
        let n = h * w;
        match self {
            Self::LR => (t / w, t % w),
            Self::RL => Self::LR.pixel(n - 1 - t, h, w),
            Self::TB => (t % h, t / h),
            Self::BT => Self::TB.pixel(n - 1 - t, h, w),
        }
    }

    /// Token index of pixel `(row, col)`.
    pub fn token(self, row: usize, col: usize, h: usize, w: usize) -> usize {
        let n = h * w;
        match self {
            Self::LR => row * w + col,
            Self::RL => n - 1 - Self::LR.token(row, col, h, w),
            Self::TB => col * h + row,
            Self::BT => n - 1 - Self::TB.token(row, col, h, w),
        }
    }

    /// Direction visiting the same pixels in reverse order.
    pub fn reversed(self) -> Self {
        match self {
            Self::LR => Self::RL,
            Self::RL => Self::LR,
            Self::TB => Self::BT,
            Self::BT => Self::TB,
        }
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LR => "LR",
            Self::RL => "RL",
            Self::TB => "TB",
            Self::BT => "BT",
        })
    }
}

impl FromStr for ScanDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LR" => Ok(Self::LR),
            "RL" => Ok(Self::RL),
            "TB" => Ok(Self::TB),
            "BT" => Ok(Self::BT),
            _ => Err(Error::Config(format!("unknown scan direction {s:?}"))),
        }
    }
}

/// Splits a rank-3 or rank-4 map shape into `(batch, C, H, W, batched)`.
fn map_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => shape_err(format!("expected [C, H, W] or [N, C, H, W], got {shape:?}")),
    }
}

fn seq_dims(shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [t, c] => Ok((1, t, c, false)),
        [n, t, c] => Ok((n, t, c, true)),
        _ => shape_err(format!("expected [T, C] or [N, T, C], got {shape:?}")),
    }
}

fn scan_index(n: usize, c: usize, h: usize, w: usize, dir: ScanDirection) -> Vec<usize> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(n * hw * c);
    for b in 0..n {
        for t in 0..hw {
            let (r, col) = dir.pixel(t, h, w);
            for ch in 0..c {
                idx.push(b * c * hw + ch * hw + r * w + col);
            }
        }
    }
    idx
}

fn unscan_index(n: usize, c: usize, h: usize, w: usize, dir: ScanDirection) -> Vec<usize> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(n * hw * c);
    for b in 0..n {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    idx.push(b * hw * c + dir.token(r, col, h, w) * c + ch);
                }
            }
        }
    }
    idx
}

fn gather<T: Scalar>(x: &Tensor<T>, idx: &[usize], shape: Vec<usize>) -> Tensor<T> {
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(shape, data).expect("index length matches shape")
}

fn scan_plan(shape: &[usize], dir: ScanDirection) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n, c, h, w, batched) = map_dims(shape)?;
    let out = if batched {
        vec![n, h * w, c]
    } else {
        vec![h * w, c]
    };
    Ok((scan_index(n, c, h, w, dir), out))
}

fn unscan_plan(
    shape: &[usize],
    dir: ScanDirection,
    h: usize,
    w: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n, t, c, batched) = seq_dims(shape)?;
    if t != h * w {
        return shape_err(format!("sequence of {t} tokens cannot fill a {h}x{w} grid"));
    }
    let out = if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    };
    Ok((unscan_index(n, c, h, w, dir), out))
}

/// Serializes a map along `dir`.
pub fn scan<T: Scalar>(x: &Tensor<T>, dir: ScanDirection) -> Result<Tensor<T>> {
    let (idx, shape) = scan_plan(x.shape(), dir)?;
    Ok(gather(x, &idx, shape))
}

/// Inverse of [`scan`].
pub fn unscan<T: Scalar>(
    seq: &Tensor<T>,
    dir: ScanDirection,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (idx, shape) = unscan_plan(seq.shape(), dir, h, w)?;
    Ok(gather(seq, &idx, shape))
}

/// Plain row-major serialization.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    scan(x, ScanDirection::LR)
}

/// Rotates every `H x W` plane by 180 degrees.
pub fn rotate180<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, _) = map_dims(x.shape())?;
    let hw = h * w;
    let idx: Vec<usize> = (0..n * c)
        .flat_map(|plane| (0..hw).map(move |p| plane * hw + hw - 1 - p))
        .collect();
    Ok(gather(x, &idx, x.shape().to_vec()))
}

/// Sequence order reversal along the token axis.
pub fn reverse_tokens<T: Scalar>(seq: &Tensor<T>) -> Result<Tensor<T>> {
    let idx = reverse_index(seq.shape())?;
    Ok(gather(seq, &idx, seq.shape().to_vec()))
}

fn reverse_index(shape: &[usize]) -> Result<Vec<usize>> {
    let (n, t, c, _) = seq_dims(shape)?;
    Ok((0..n)
        .flat_map(|b| (0..t).flat_map(move |i| (0..c).map(move |ch| (b * t + t - 1 - i) * c + ch)))
        .collect())
}

/// Neighbor offsets `(dr, dc)` read by each quarter of the channels.
const SHIFTS: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

fn qshift_index(n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let quarter = c / 4;
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            let (dr, dc) = SHIFTS[(ch / quarter).min(3)];
            for r in 0..h {
                for col in 0..w {
                    let (sr, sc) = (r as isize + dr, col as isize + dc);
                    idx.push(
                        if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                            PAD
                        } else {
                            ((b * c + ch) * h + sr as usize) * w + sc as usize
                        },
                    );
                }
            }
        }
    }
    idx
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable [`scan`].
    pub fn scan(self, dir: ScanDirection) -> Result<Var<'t, T>> {
        let (idx, shape) = scan_plan(&self.shape(), dir)?;
        self.gather(Rc::new(idx), shape)
    }

    /// Differentiable [`unscan`].
    pub fn unscan(self, dir: ScanDirection, h: usize, w: usize) -> Result<Var<'t, T>> {
        let (idx, shape) = unscan_plan(&self.shape(), dir, h, w)?;
        self.gather(Rc::new(idx), shape)
    }

    /// Differentiable [`reverse_tokens`].
    pub fn reverse_tokens(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        self.gather(Rc::new(reverse_index(&shape)?), shape)
    }

    /// Quarter-channel shift: the four channel groups read their right, left,
    /// lower and upper neighbor (zero outside the map), blended with the
    /// original as `(1 - mix)·x + mix·shifted` with a per-channel `mix`.
    pub fn qshift(self, mix: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (n, c, h, w, batched) = map_dims(&shape)?;
        if c % 4 != 0 {
            return Err(Error::Config(format!(
                "Q-shift needs channels divisible by 4, got {c}"
            )));
        }
        if mix.shape() != [c] {
            return shape_err(format!("Q-shift mix {:?} for {c} channels", mix.shape()));
        }
        let shifted = self.gather(Rc::new(qshift_index(n, c, h, w)), shape.clone())?;
        let mix = mix.reshape(if batched {
            vec![1, c, 1, 1]
        } else {
            vec![c, 1, 1]
        })?;
        self.add(shifted.sub(self)?.mul_bcast(mix)?)
    }
}

/// Q-shift followed by a row-major scan.
pub fn vision2seq<'t, T: Scalar>(x: Var<'t, T>, mix: Var<'t, T>) -> Result<Var<'t, T>> {
    x.qshift(mix)?.scan(ScanDirection::LR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use ScanDirection::*;

    fn labels() -> Tensor<f64> {
        // [[a, b], [c, d]] with a..d = 1..4
        Tensor::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn two_by_two_orders() {
        let x = labels();
        let order = |d| scan(&x, d).unwrap().into_data();
        assert_eq!(order(LR), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(order(RL), [4.0, 3.0, 2.0, 1.0]);
        assert_eq!(order(TB), [1.0, 3.0, 2.0, 4.0]);
        assert_eq!(order(BT), [4.0, 2.0, 3.0, 1.0]);
        assert_eq!(flatten(&x).unwrap().into_data(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_pixel_is_direction_free() {
        let x = Tensor::<f64>::from_f64([3, 1, 1], &[1.0, 2.0, 3.0]).unwrap();
        for d in ScanDirection::ALL {
            assert_eq!(scan(&x, d).unwrap().data(), x.data());
        }
    }

    #[test]
    fn scan_preserves_the_token_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn([2, 3, 5], 1.0, &mut rng);
        let sorted = |t: &Tensor<f64>| {
            let mut v = t.data().to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        for d in ScanDirection::ALL {
            assert_eq!(sorted(&scan(&x, d).unwrap()), sorted(&x));
        }
    }

    #[test]
    fn round_trip_and_reversal_relations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 4, 6], 1.0, &mut rng);
        for d in ScanDirection::ALL {
            assert_eq!(
                unscan(&scan(&x, d).unwrap(), d, 4, 6).unwrap().data(),
                x.data()
            );
        }
        let s = Tensor::<f64>::randn([24, 2], 1.0, &mut rng);
        assert_eq!(
            unscan(&s, RL, 4, 6).unwrap().data(),
            unscan(&reverse_tokens(&s).unwrap(), LR, 4, 6)
                .unwrap()
                .data()
        );
    }

    #[test]
    fn column_major_is_the_transposed_row_major() {
        let s =
            Tensor::<f64>::from_f64([12, 1], &(0..12).map(f64::from).collect::<Vec<_>>()).unwrap();
        let tb = unscan(&s, TB, 3, 4).unwrap();
        let lr = unscan(&s, LR, 4, 3).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(tb.at(&[0, r, c]), lr.at(&[0, c, r]));
            }
        }
    }

    #[test]
    fn unscan_rejects_wrong_length() {
        let s = Tensor::<f64>::zeros([5, 2]);
        assert!(matches!(unscan(&s, LR, 2, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn rotation_swaps_opposite_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng);
        let r = rotate180(&x).unwrap();
        for d in ScanDirection::ALL {
            assert_eq!(
                scan(&r, d).unwrap().data(),
                scan(&x, d.reversed()).unwrap().data()
            );
        }
    }

    #[test]
    fn zero_mix_vision2seq_is_flatten() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([8, 3, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let out = vision2seq(tape.constant(x.clone()), tape.constant(Tensor::zeros([8]))).unwrap();
        assert_eq!(out.shape(), [9, 8]);
        assert_eq!(out.value().data(), flatten(&x).unwrap().data());
    }

    #[test]
    fn single_pixel_shift_sees_only_padding() {
        let x = Tensor::<f64>::from_f64([4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mix = Tensor::<f64>::from_f64([4], &[0.25, 0.5, 0.75, 1.0]).unwrap();
        let tape = Tape::new();
        let out = vision2seq(tape.constant(x), tape.constant(mix))
            .unwrap()
            .value();
        assert_eq!(out.data(), &[0.75, 1.0, 0.75, 0.0]);
    }

    #[test]
    fn shift_reads_the_named_neighbor() {
        // 4 channels over a 1x3 strip holding 1, 2, 3 in every channel.
        let x =
            Tensor::<f64>::from_f64([4, 1, 3], &[1., 2., 3., 1., 2., 3., 1., 2., 3., 1., 2., 3.])
                .unwrap();
        let tape = Tape::new();
        let out = tape
            .constant(x)
            .qshift(tape.constant(Tensor::ones([4])))
            .unwrap()
            .value();
        assert_eq!(&out.data()[0..3], &[2.0, 3.0, 0.0]);
        assert_eq!(&out.data()[3..6], &[0.0, 1.0, 2.0]);
        assert_eq!(&out.data()[6..12], &[0.0; 6]);
    }

    #[test]
    fn qshift_rejects_odd_channel_counts() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros([3, 2, 2]));
        assert!(matches!(
            x.qshift(tape.constant(Tensor::zeros([3]))),
            Err(Error::Config(_))
        ));
    }
}
