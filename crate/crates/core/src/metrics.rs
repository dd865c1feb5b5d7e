//! Overlap and boundary-distance metrics on binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Binary `H x W` mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return shape_err(format!(
                "{} mask bits for a {height}x{width} grid",
                bits.len()
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            bits,
        }
    }

    /// `value >= threshold` per element.
    pub fn threshold<T: PartialOrd + Copy>(
        height: usize,
        width: usize,
        values: &[T],
        threshold: T,
    ) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|&v| v >= threshold).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels with a 4-neighbor outside the foreground (the frame counts as outside).
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
                if edge
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1)
                {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return shape_err(format!(
            "masks {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        ));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> Result<(usize, usize, usize)> {
    same_shape(a, b)?;
    let inter = a.bits.iter().zip(&b.bits).filter(|(&x, &y)| x && y).count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, a, b) = overlap(pred, gt)?;
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    })
}

/// `|A∩B| / |A∪B|`, and 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, a, b) = overlap(pred, gt)?;
    let union = a + b - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

/// Linear-interpolated percentile `q ∈ [0, 100]` of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95th percentile of the nearest-boundary distances from each mask's
/// boundary pixels to the other's, pooled over both directions.
/// `spacing` is the physical `(row, col)` pixel size.
pub fn hd95(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Result<f64> {
    same_shape(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (pa, pb) = (pred.boundary(), gt.boundary());
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let dr = (r as f64 - r2 as f64) * spacing.0;
                        let dc = (c as f64 - c2 as f64) * spacing.1;
                        dr * dr + dc * dc
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    let mut d = nearest(&pa, &pb);
    d.extend(nearest(&pb, &pa));
    d.sort_by(f64::total_cmp);
    Ok(percentile(&d, 95.0))
}
