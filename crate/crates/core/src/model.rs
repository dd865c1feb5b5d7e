//! The U-shaped encoder–decoder.
//!
//! ```text
//! stem (3x3, full resolution) ─────────────────────────────┐ skip
//! stage 1: 3x3/2 + BN + ReLU + SASE ───────────────────┐   │
//! ...                                                  │   │
//! stage n: 3x3/2 + BN + ReLU + SASE → DARM             │   │
//! decoder: 2x2/2 transposed conv + ChannelFusion  ◄────┘ ◄─┘
//! head: 1x1 conv to class logits
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::darm::{darm_forward, DarmOptions, DarmParams};
use crate::error::{shape_err, Error, Result};
use crate::nn::{impl_module, BatchNorm2d, Conv2d, ConvTranspose2d, Ctx};
use crate::quadscan::ScanDirection;
use crate::sase::{sase_forward, SaseMode, SaseParams, SeRatioReading};
use crate::tensor::{Conv2dSpec, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    #[default]
    Small,
}

impl Variant {
    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Self::Full => vec![16, 32, 64, 128, 256],
            Self::Small => vec![8, 16, 24, 32, 48],
        }
    }
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Scan directions averaged inside DARM.
    pub directions: Vec<ScanDirection>,
    /// Independent weights per direction; `false` ties them.
    pub dual_rwkv: bool,
    pub darm: bool,
    pub sase: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            directions: ScanDirection::ALL.to_vec(),
            dual_rwkv: true,
            darm: true,
            sase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Encoder widths; the variant's defaults when absent.
    pub stage_widths: Option<Vec<usize>>,
    pub input_channels: usize,
    pub num_classes: usize,
    /// Static input side length; fixes each stage's SASE mode.
    pub image_size: usize,
    pub ablation: Ablation,
    /// Refine every encoder skip with its own DARM as well.
    pub darm_on_skips: bool,
    /// Q-shift the DARM input before scanning.
    pub qshift: bool,
    pub se_ratio: SeRatioReading,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Small,
            stage_widths: None,
            input_channels: 1,
            num_classes: 1,
            image_size: 64,
            ablation: Ablation::default(),
            darm_on_skips: false,
            qshift: false,
            se_ratio: SeRatioReading::Both,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Two-stage `[8, 16]` configuration on 32x32 single-channel inputs.
    pub fn tiny() -> Self {
        Self {
            stage_widths: Some(vec![8, 16]),
            image_size: 32,
            ..Self::default()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stage_widths
            .clone()
            .unwrap_or_else(|| self.variant.default_widths())
    }

    /// Copy with the widths written out.
    pub fn resolved(&self) -> Self {
        Self {
            stage_widths: Some(self.widths()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if widths.is_empty() {
            return Err(Error::Config("stage_widths must not be empty".into()));
        }
        for (i, &w) in widths.iter().enumerate() {
            if w == 0 || w % 8 != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {w} is not a positive multiple of 8",
                    i + 1
                )));
            }
            if i > 0 && w <= widths[i - 1] {
                return Err(Error::Config(format!(
                    "stage {} width {w} does not exceed stage {} width {}",
                    i + 1,
                    i,
                    widths[i - 1]
                )));
            }
        }
        if self.input_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "input_channels and num_classes must be positive".into(),
            ));
        }
        let factor = 1usize << widths.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^{} for stage {}",
                self.image_size,
                widths.len(),
                widths.len()
            )));
        }
        if (self.ablation.darm || self.darm_on_skips) && self.ablation.directions.is_empty() {
            return Err(Error::Config(
                "ablation.directions must not be empty when DARM is enabled".into(),
            ));
        }
        Ok(())
    }

    fn darm_options(&self) -> DarmOptions {
        DarmOptions {
            directions: self.ablation.directions.clone(),
            tied: !self.ablation.dual_rwkv,
            qshift: self.qshift,
        }
    }
}

/// 3x3 convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl_module!(ConvBnRelu { conv, bn });

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let spec = Conv2dSpec::default().stride(stride).padding(1);
        Self {
            conv: Conv2d::new(cin, cout, 3, spec, false, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.bn.forward(ctx, self.conv.forward(ctx, x)?)?.relu())
    }
}

/// Concatenation of skip and upsampled features followed by two conv layers.
#[derive(Debug, Clone)]
pub struct ChannelFusion<T> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
}

impl_module!(ChannelFusion { first, second });

impl<T: Scalar> ChannelFusion<T> {
    pub fn new(skip: usize, up: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: ConvBnRelu::new(skip + up, out, 1, rng),
            second: ConvBnRelu::new(out, out, 1, rng),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.first.conv.macs(h, w) + self.second.conv.macs(h, w)
    }
}

pub fn channel_fusion<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    skip: Var<'t, T>,
    upsampled: Var<'t, T>,
    p: &ChannelFusion<T>,
) -> Result<Var<'t, T>> {
    let (s, u) = (skip.shape(), upsampled.shape());
    if s.len() != 4 || u.len() != 4 || s[0] != u[0] || s[2..] != u[2..] {
        return shape_err(format!("channel fusion of skip {s:?} with upsampled {u:?}"));
    }
    let x = Var::concat(&[skip, upsampled], 1)?;
    p.second.forward(ctx, p.first.forward(ctx, x)?)
}

#[derive(Debug, Clone)]
pub struct EncoderStage<T> {
    pub down: ConvBnRelu<T>,
    pub sase: Option<SaseParams<T>>,
}

impl_module!(EncoderStage { down, sase });

#[derive(Debug, Clone)]
pub struct DecoderStage<T> {
    pub up: ConvTranspose2d<T>,
    pub fusion: ChannelFusion<T>,
}

impl_module!(DecoderStage { up, fusion });

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub stem: ConvBnRelu<T>,
    pub encoder: Vec<EncoderStage<T>>,
    pub bottleneck: Option<DarmParams<T>>,
    /// One DARM per encoder skip when enabled.
    pub skip_darm: Vec<DarmParams<T>>,
    /// Ordered from the deepest stage up.
    pub decoder: Vec<DecoderStage<T>>,
    pub head: Conv2d<T>,
    config: ModelConfig,
}

impl_module!(Model {
    stem,
    encoder,
    bottleneck,
    skip_darm,
    decoder,
    head
});

/// MAC count of one named part of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageFlops {
    pub name: String,
    pub resolution: usize,
    pub channels: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub stages: Vec<StageFlops>,
    pub total: u64,
}

impl<T: Scalar> Model<T> {
    /// Deterministically initialized network for `config`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let widths = config.widths();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let stem = ConvBnRelu::new(config.input_channels, widths[0], 1, &mut rng);
        let mut encoder = Vec::with_capacity(widths.len());
        let mut side = config.image_size;
        let mut prev = widths[0];
        for &w in &widths {
            side /= 2;
            let down = ConvBnRelu::new(prev, w, 2, &mut rng);
            let sase = if config.ablation.sase {
                Some(SaseParams::new(w, side, side, config.se_ratio, &mut rng)?)
            } else {
                None
            };
            encoder.push(EncoderStage { down, sase });
            prev = w;
        }
        let opts = config.darm_options();
        let last = *widths.last().expect("nonempty");
        let bottleneck = if config.ablation.darm {
            Some(DarmParams::new(last, &opts, &mut rng)?)
        } else {
            None
        };
        let skip_darm = if config.darm_on_skips {
            widths[..widths.len() - 1]
                .iter()
                .map(|&w| DarmParams::new(w, &opts, &mut rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut decoder = Vec::with_capacity(widths.len());
        for i in (0..widths.len()).rev() {
            let target = if i == 0 { widths[0] } else { widths[i - 1] };
            decoder.push(DecoderStage {
                up: ConvTranspose2d::new(widths[i], target, 2, 2, &mut rng),
                fusion: ChannelFusion::new(target, target, target, &mut rng),
            });
        }
        let head = Conv2d::new(
            widths[0],
            config.num_classes,
            1,
            Conv2dSpec::default(),
            true,
            &mut rng,
        );
        Ok(Self {
            stem,
            encoder,
            bottleneck,
            skip_darm,
            decoder,
            head,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sase_modes(&self) -> Vec<Option<SaseMode>> {
        self.encoder
            .iter()
            .map(|s| s.sase.as_ref().map(SaseParams::mode))
            .collect()
    }

    /// Per-pixel logits `[N, num_classes, H, W]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let [_, c, h, w] = shape[..] else {
            return shape_err(format!("model input must be [N, C, H, W], got {shape:?}"));
        };
        if c != self.config.input_channels {
            return shape_err(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            ));
        }
        let factor = 1usize << self.encoder.len();
        if h % factor != 0 || w % factor != 0 {
            return shape_err(format!("input {h}x{w} is not divisible by {factor}"));
        }
        let mut skips = vec![self.stem.forward(ctx, x)?];
        let mut cur = skips[0];
        for (i, stage) in self.encoder.iter().enumerate() {
            cur = stage.down.forward(ctx, cur)?;
            if let Some(s) = &stage.sase {
                cur = sase_forward(ctx, cur, s)?;
            }
            if i + 1 < self.encoder.len() {
                let skip = match self.skip_darm.get(i) {
                    Some(d) => darm_forward(ctx, cur, d)?,
                    None => cur,
                };
                skips.push(skip);
            }
        }
        if let Some(d) = &self.bottleneck {
            cur = darm_forward(ctx, cur, d)?;
        }
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = stage.up.forward(ctx, cur)?;
            cur = channel_fusion(ctx, skip, up, &stage.fusion)?;
        }
        self.head.forward(ctx, cur)
    }

    /// Inference-mode forward on a plain tensor.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let y = self.forward(&ctx, tape.constant(x.clone()))?;
        Ok((*y.value()).clone())
    }

    /// Analytic multiply-accumulate count for one `[C, H, W]` or `[N, C, H, W]` input.
    pub fn flops_estimate(&self, input_shape: &[usize]) -> Result<FlopsReport> {
        let (n, h, w) = match *input_shape {
            [_, h, w] => (1, h, w),
            [n, _, h, w] => (n, h, w),
            _ => {
                return shape_err(format!(
                    "flops estimate needs a map shape, got {input_shape:?}"
                ))
            }
        };
        let n = n as u64;
        let mut stages = Vec::new();
        let mut push = |name: String, res: usize, channels: usize, macs: u64| {
            stages.push(StageFlops {
                name,
                resolution: res,
                channels,
                macs: n * macs,
            });
        };
        push(
            "stem".into(),
            h,
            self.stem.conv.out_channels(),
            self.stem.conv.macs(h, w),
        );
        let (mut sh, mut sw) = (h, w);
        for (i, stage) in self.encoder.iter().enumerate() {
            sh /= 2;
            sw /= 2;
            let mut macs = stage.down.conv.macs(sh, sw);
            if let Some(s) = &stage.sase {
                macs += s.macs(sh, sw);
            }
            if let Some(d) = self.skip_darm.get(i) {
                macs += d.macs(sh, sw);
            }
            push(
                format!("encoder{}", i + 1),
                sh,
                stage.down.conv.out_channels(),
                macs,
            );
        }
        if let Some(d) = &self.bottleneck {
            push("bottleneck".into(), sh, d.channels(), d.macs(sh, sw));
        }
        for (j, stage) in self.decoder.iter().enumerate() {
            let macs = stage.up.macs(sh, sw);
            sh *= 2;
            sw *= 2;
            let c = stage.fusion.second.conv.out_channels();
            push(
                format!("decoder{}", self.decoder.len() - j),
                sh,
                c,
                macs + stage.fusion.macs(sh, sw),
            );
        }
        push(
            "head".into(),
            h,
            self.head.out_channels(),
            self.head.macs(h, w),
        );
        let total = stages.iter().map(|s| s.macs).sum();
        Ok(FlopsReport { stages, total })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;
    use crate::tensor::grad_check;

    fn image(n: usize, c: usize, side: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(
            [n, c, side, side],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn tiny_shape_contract() {
        let m = Model::<f32>::build(&ModelConfig::tiny()).unwrap();
        let x = Tensor::randn([2, 1, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(m.predict(&x).unwrap().shape(), [2, 1, 32, 32]);
    }

    #[test]
    fn three_stage_rgb_shape_contract() {
        let cfg = ModelConfig {
            stage_widths: Some(vec![8, 16, 32]),
            input_channels: 3,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::build(&cfg).unwrap();
        let x = Tensor::randn([1, 3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(m.predict(&x).unwrap().shape(), [1, 1, 64, 64]);
    }

    #[test]
    fn equal_seeds_build_identical_parameters() {
        let cfg = ModelConfig::tiny();
        let collect = |m: &Model<f32>| {
            let mut all = Vec::new();
            m.visit("", &mut |_, slot| {
                if let crate::nn::Slot::Param(p) = slot {
                    all.extend_from_slice(p.value.data());
                }
            });
            all
        };
        let a = collect(&Model::build(&cfg).unwrap());
        let b = collect(&Model::build(&cfg).unwrap());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = collect(&Model::build(&ModelConfig { seed: 1, ..cfg }).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn disabling_darm_changes_the_output() {
        let full = Model::<f64>::build(&ModelConfig::tiny()).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.ablation.darm = false;
        let plain = Model::<f64>::build(&cfg).unwrap();
        let x = image(1, 1, 32, 3);
        let d = full
            .predict(&x)
            .unwrap()
            .zip_map(&plain.predict(&x).unwrap(), |a, b| a - b)
            .unwrap();
        assert!(d.max_abs() > 1e-6);
    }

    #[test]
    fn batch_members_are_independent() {
        let m = Model::<f64>::build(&ModelConfig::tiny()).unwrap();
        let one = image(1, 1, 32, 4);
        let two = Tensor::new([2, 1, 32, 32], [one.data(), one.data()].concat()).unwrap();
        let y = m.predict(&two).unwrap();
        let (a, b) = y.data().split_at(32 * 32);
        assert_eq!(a, b);
    }

    #[test]
    fn config_errors_name_the_stage() {
        let bad = ModelConfig {
            stage_widths: Some(vec![8, 12]),
            ..ModelConfig::tiny()
        };
        assert!(
            matches!(Model::<f32>::build(&bad), Err(Error::Config(m)) if m.contains("stage 2"))
        );
        let bad = ModelConfig {
            stage_widths: Some(vec![16, 8]),
            ..ModelConfig::tiny()
        };
        assert!(
            matches!(Model::<f32>::build(&bad), Err(Error::Config(m)) if m.contains("stage 2"))
        );
        let bad = ModelConfig {
            image_size: 30,
            ..ModelConfig::tiny()
        };
        assert!(Model::<f32>::build(&bad).is_err());
        let mut bad = ModelConfig::tiny();
        bad.ablation.directions.clear();
        assert!(Model::<f32>::build(&bad).is_err());
        let m = Model::<f32>::build(&ModelConfig::tiny()).unwrap();
        assert!(m.predict(&Tensor::zeros([1, 1, 30, 30])).is_err());
    }

    #[test]
    fn sase_modes_follow_static_shapes() {
        let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
        use SaseMode::*;
        assert_eq!(
            m.sase_modes(),
            [
                Some(Shallow),
                Some(Shallow),
                Some(Shallow),
                Some(Deep),
                Some(Deep)
            ]
        );
    }

    #[test]
    fn small_variant_is_smaller() {
        let small = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let full = Model::<f32>::build(&ModelConfig {
            variant: Variant::Full,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(small.param_count() < full.param_count());
    }

    #[test]
    fn tied_directions_shrink_the_count() {
        let free = Model::<f32>::build(&ModelConfig::tiny()).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.ablation.dual_rwkv = false;
        let tied = Model::<f32>::build(&cfg).unwrap();
        let unit = 4 * 16 * 16 + 4 * 16;
        assert_eq!(free.param_count() - tied.param_count(), 3 * unit);
    }

    #[test]
    fn flops_are_additive_and_match_hand_counts() {
        let m = Model::<f32>::build(&ModelConfig::tiny()).unwrap();
        let r = m.flops_estimate(&[1, 32, 32]).unwrap();
        assert_eq!(r.stages.iter().map(|s| s.macs).sum::<u64>(), r.total);
        // stem: 3x3, 1 -> 8 channels over 32x32
        assert_eq!(r.stages[0].macs, 9 * 8 * 32 * 32);
        // head: 1x1, 8 -> 1 over 32x32
        assert_eq!(r.stages.last().unwrap().macs, 8 * 32 * 32);
        let r2 = m.flops_estimate(&[2, 1, 32, 32]).unwrap();
        assert_eq!(r2.total, 2 * r.total);
    }

    #[test]
    fn fusion_hand_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ChannelFusion::<f64>::new(1, 1, 1, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let zero = tape.constant(Tensor::zeros([1, 1, 3, 3]));
        let out = channel_fusion(&ctx, zero, zero, &f).unwrap();
        assert_eq!(out.shape(), [1, 1, 3, 3]);
        assert_eq!(out.value().max_abs(), 0.0);

        // Single pixel: only kernel centers see data.
        let mut w1 = Tensor::zeros([1, 2, 3, 3]);
        w1.set(&[0, 0, 1, 1], 2.0);
        w1.set(&[0, 1, 1, 1], -1.0);
        let mut w2 = Tensor::zeros([1, 1, 3, 3]);
        w2.set(&[0, 0, 1, 1], 3.0);
        f.first.conv.weight.value = w1;
        f.second.conv.weight.value = w2;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let skip = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[1.5]).unwrap());
        let up = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[0.5]).unwrap());
        let y = channel_fusion(&ctx, skip, up, &f).unwrap().value().item();
        let s = 1.0 / (1.0 + 1e-5f64).sqrt();
        let want = 3.0 * (2.0 * 1.5 - 0.5) * s * s;
        assert!((y - want).abs() < 1e-12, "{y} vs {want}");
        let bad = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(channel_fusion(&ctx, skip, bad, &f).is_err());
    }

    #[test]
    fn fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = ChannelFusion::<f64>::new(2, 2, 2, &mut rng);
        let up = image(2, 2, 4, 7);
        let skip = image(2, 2, 4, 8);
        let err = grad_check(
            |t, s| {
                let ctx = Ctx::new(t, true, false);
                Ok(channel_fusion(&ctx, s, t.constant(up.clone()), &f)?
                    .square()
                    .sum())
            },
            &skip,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
