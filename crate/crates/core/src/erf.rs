//! Effective receptive field: input-gradient saliency of the center output.

use std::path::Path;
use std::rc::Rc;

use image::{GrayImage, Luma};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::nn::Ctx;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.50, 0.90, 0.95, 0.99];
pub const PROBE_COUNT: usize = 32;
pub const PROBE_SEED: u64 = 0;

/// Cumulative-mass slack when comparing against a threshold, so that
/// rounding in the normalization does not demand an extra pixel.
const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, nonnegative, sums to 1.
    pub heatmap: Vec<f64>,
    pub model_id: String,
    pub samples: usize,
    pub thresholds: Vec<f64>,
}

impl ErfMap {
    /// Normalizes a nonnegative field to unit mass.
    pub fn from_field(height: usize, width: usize, field: Vec<f64>) -> Result<Self> {
        if field.len() != height * width {
            return shape_err(format!(
                "{} values for a {height}x{width} field",
                field.len()
            ));
        }
        if field.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "ERF field must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = field.iter().sum();
        if total == 0.0 {
            return Err(Error::DegenerateErf);
        }
        Ok(Self {
            height,
            width,
            heatmap: field.into_iter().map(|v| v / total).collect(),
            model_id: String::new(),
            samples: 0,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.heatmap[row * self.width + col]
    }

    /// Mass outside the `k x k` window centered on `(H/2, W/2)`.
    pub fn mass_outside_window(&self, k: usize) -> f64 {
        let (cr, cc) = (self.height / 2, self.width / 2);
        let half = k / 2;
        let inside = |r: usize, c: usize| r.abs_diff(cr) <= half && c.abs_diff(cc) <= half;
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| !inside(r, c))
            .map(|(r, c)| self.at(r, c))
            .sum()
    }

    /// 8-bit grayscale image scaled so the largest entry is 255.
    pub fn to_image(&self) -> GrayImage {
        let max = self.heatmap.iter().copied().fold(0.0, f64::max);
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.at(y as usize, x as usize) / max;
            Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image().save(path)?;
        Ok(())
    }

    /// `threshold,ratio` rows over the map's threshold grid.
    pub fn ratios_csv(&self) -> Result<String> {
        let mut out = String::from("threshold,ratio\n");
        for &t in &self.thresholds {
            out.push_str(&format!("{t},{}\n", high_contribution_ratio(self, t)?));
        }
        Ok(out)
    }
}

/// Smallest fraction of pixels whose largest contributions reach mass `t`.
pub fn high_contribution_ratio(map: &ErfMap, t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in (0, 1], got {t}"
        )));
    }
    let mut v = map.heatmap.clone();
    v.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut k = v.len();
    for (i, x) in v.iter().enumerate() {
        cum += x;
        if cum >= t - MASS_TOLERANCE {
            k = i + 1;
            break;
        }
    }
    Ok(k as f64 / v.len() as f64)
}

/// Saliency of the summed center outputs of `f` over the batch `inputs`.
///
/// Samples are assumed independent (no cross-batch statistics inside `f`), so
/// a single backward pass yields every per-sample gradient.
pub fn erf_map_with<T, F>(f: F, inputs: &Tensor<T>) -> Result<ErfMap>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let [n, c, h, w] = inputs.shape()[..] else {
        return shape_err(format!(
            "ERF inputs must be [N, C, H, W], got {:?}",
            inputs.shape()
        ));
    };
    if n == 0 {
        return Err(Error::InvalidArgument(
            "ERF needs at least one probe".into(),
        ));
    }
    let tape = Tape::new();
    let x = tape.leaf(inputs.clone(), true);
    let y = f(&tape, x)?;
    let shape = y.shape();
    let [yn, k, yh, yw] = shape[..] else {
        return shape_err(format!("ERF output must be [N, K, H, W], got {shape:?}"));
    };
    if yn != n {
        return shape_err(format!("{n} probes produced {yn} outputs"));
    }
    let center = (yh / 2) * yw + yw / 2;
    let index: Vec<usize> = (0..n * k).map(|p| p * yh * yw + center).collect();
    let objective = y.gather(Rc::new(index), [n * k])?.sum();
    let grads = tape.backward(objective)?;
    let g = grads.get_or_zeros(x);
    let mut field = vec![0.0; h * w];
    for (i, v) in g.data().iter().enumerate() {
        field[i % (h * w)] += v.to_f64().unwrap_or(f64::NAN).abs();
    }
    let scale = (n * c) as f64;
    let mut map = ErfMap::from_field(h, w, field.into_iter().map(|v| v / scale).collect())?;
    map.samples = n;
    Ok(map)
}

/// ERF of `model` in evaluation mode.
pub fn erf_map<T: Scalar>(model: &Model<T>, inputs: &Tensor<T>) -> Result<ErfMap> {
    let mut map = erf_map_with(|tape, x| model.forward(&Ctx::eval(tape), x), inputs)?;
    map.model_id = model_id(model);
    Ok(map)
}

/// Standard-normal probe images at the model's native size.
pub fn probe_inputs<T: Scalar>(model: &Model<T>, count: usize, seed: u64) -> Tensor<T> {
    let c = model.config();
    Tensor::randn(
        [count, c.input_channels, c.image_size, c.image_size],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Short human-readable description of the architecture.
pub fn model_id<T: Scalar>(model: &Model<T>) -> String {
    let c = model.config();
    let a = &c.ablation;
    let dirs: Vec<String> = a.directions.iter().map(|d| d.to_string()).collect();
    format!(
        "{:?} widths={:?} darm={} sase={} dual={} dirs={} seed={}",
        c.variant,
        c.widths(),
        a.darm,
        a.sase,
        a.dual_rwkv,
        dirs.join("+"),
        c.seed
    )
}
