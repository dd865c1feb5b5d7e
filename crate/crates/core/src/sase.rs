//! Stage-adaptive squeeze-and-excitation block.
//!
//! High-resolution stages (`C < H·W`) use a dilated inverted bottleneck;
//! deep stages (`C ≥ H·W`) use a split-channel bottleneck with a depthwise
//! separable convolution. Both add their update to the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{impl_module, BatchNorm2d, Conv2d, Ctx, Module, Param, Slot};
use crate::tensor::{Conv2dSpec, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaseMode {
    Shallow,
    Deep,
}

/// Deep iff the channel count reaches the pixel count.
pub fn select_mode(c: usize, h: usize, w: usize) -> SaseMode {
    if c >= h * w {
        SaseMode::Deep
    } else {
        SaseMode::Shallow
    }
}

/// How the ratio of 4 is applied in shallow mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeRatioReading {
    /// Expansion 4 and SE reduction 4.
    #[default]
    Both,
    /// Expansion 4, SE without reduction.
    ExpansionOnly,
    /// No expansion, SE reduction 4.
    ReductionOnly,
}

impl SeRatioReading {
    /// `(expansion, se_reduction)`.
    pub fn factors(self) -> (usize, usize) {
        match self {
            Self::Both => (SE_RATIO, SE_RATIO),
            Self::ExpansionOnly => (SE_RATIO, 1),
            Self::ReductionOnly => (1, SE_RATIO),
        }
    }
}

pub const SE_RATIO: usize = 4;
/// Channel groups of the deep-mode recombination.
pub const DEEP_SPLITS: usize = 8;

/// Two-layer gate computed from globally pooled features.
#[derive(Debug, Clone)]
pub struct SeGate<T> {
    pub reduce: Conv2d<T>,
    pub expand: Conv2d<T>,
}

impl_module!(SeGate { reduce, expand });

impl<T: Scalar> SeGate<T> {
    pub fn new(c: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            reduce: Conv2d::new(c, hidden, 1, Conv2dSpec::default(), true, rng),
            expand: Conv2d::new(hidden, c, 1, Conv2dSpec::default(), true, rng),
        }
    }

    pub fn macs(&self) -> u64 {
        self.reduce.macs(1, 1) + self.expand.macs(1, 1)
    }
}

/// `sigmoid(W₂·relu(W₁·gap(X)))` as `[N, C, 1, 1]`.
pub fn se_gate<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    x: Var<'t, T>,
    p: &SeGate<T>,
) -> Result<Var<'t, T>> {
    let pooled = x.global_avg_pool()?;
    let hidden = p.reduce.forward(ctx, pooled)?.relu();
    Ok(p.expand.forward(ctx, hidden)?.sigmoid())
}

fn gated<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    x: Var<'t, T>,
    se: &Option<SeGate<T>>,
) -> Result<Var<'t, T>> {
    match se {
        Some(g) => x.mul_bcast(se_gate(ctx, x, g)?),
        None => Ok(x),
    }
}

fn conv1x1<T: Scalar>(
    cin: usize,
    cout: usize,
    groups: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Conv2d<T> {
    Conv2d::new(
        cin,
        cout,
        1,
        Conv2dSpec::default().groups(groups),
        bias,
        rng,
    )
}

/// Inverted bottleneck with a dilated depthwise convolution.
#[derive(Debug, Clone)]
pub struct ShallowSase<T> {
    pub expand: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub depthwise: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    /// `None` applies a constant gate of 1.
    pub se: Option<SeGate<T>>,
    pub project: Conv2d<T>,
}

impl_module!(ShallowSase {
    expand,
    bn1,
    depthwise,
    bn2,
    se,
    project
});

/// Split-channel bottleneck with a depthwise separable convolution.
#[derive(Debug, Clone)]
pub struct DeepSase<T> {
    /// Grouped pointwise conv doubling each of the channel splits.
    pub recombine: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub depthwise: Conv2d<T>,
    pub pointwise: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    /// `None` applies a constant gate of 1.
    pub se: Option<SeGate<T>>,
    pub project: Conv2d<T>,
}

impl_module!(DeepSase {
    recombine,
    bn1,
    depthwise,
    pointwise,
    bn2,
    se,
    project
});

#[derive(Debug, Clone)]
pub enum SaseParams<T> {
    Shallow(ShallowSase<T>),
    Deep(DeepSase<T>),
}

impl<T: Scalar> Module<T> for SaseParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'a, T>)) {
        match self {
            Self::Shallow(p) => p.visit(prefix, f),
            Self::Deep(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Self::Shallow(p) => p.visit_mut(prefix, f),
            Self::Deep(p) => p.visit_mut(prefix, f),
        }
    }
}

impl<T: Scalar> SaseParams<T> {
    /// Builds the variant selected for a stage of static shape `c x h x w`.
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        reading: SeRatioReading,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match select_mode(c, h, w) {
            SaseMode::Shallow => {
                let (e, r) = reading.factors();
                let wide = e * c;
                if !wide.is_multiple_of(r) {
                    return Err(Error::Config(format!(
                        "SE reduction {r} does not divide {wide} channels"
                    )));
                }
                let dw = Conv2dSpec::default().padding(2).dilation(2).groups(wide);
                Ok(Self::Shallow(ShallowSase {
                    expand: conv1x1(c, wide, 1, false, rng),
                    bn1: BatchNorm2d::new(wide),
                    depthwise: Conv2d::new(wide, wide, 3, dw, false, rng),
                    bn2: BatchNorm2d::new(wide),
                    se: Some(SeGate::new(wide, wide / r, rng)),
                    project: conv1x1(wide, c, 1, true, rng),
                }))
            }
            SaseMode::Deep => {
                if !c.is_multiple_of(DEEP_SPLITS) {
                    return Err(Error::Config(format!(
                        "deep SASE splits channels into {DEEP_SPLITS} groups, got {c} channels"
                    )));
                }
                let wide = 2 * c;
                let dw = Conv2dSpec::default().padding(1).groups(wide);
                Ok(Self::Deep(DeepSase {
                    recombine: conv1x1(c, wide, DEEP_SPLITS, false, rng),
                    bn1: BatchNorm2d::new(wide),
                    depthwise: Conv2d::new(wide, wide, 3, dw, false, rng),
                    pointwise: conv1x1(wide, wide, 1, false, rng),
                    bn2: BatchNorm2d::new(wide),
                    se: Some(SeGate::new(wide, c / SE_RATIO, rng)),
                    project: conv1x1(wide, c, 1, true, rng),
                }))
            }
        }
    }

    pub fn mode(&self) -> SaseMode {
        match self {
            Self::Shallow(_) => SaseMode::Shallow,
            Self::Deep(_) => SaseMode::Deep,
        }
    }

    /// Removes the gate, leaving a constant gate of 1.
    pub fn without_gate(mut self) -> Self {
        match &mut self {
            Self::Shallow(p) => p.se = None,
            Self::Deep(p) => p.se = None,
        }
        self
    }

    /// Multiply-accumulates on an `h x w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let se = |g: &Option<SeGate<T>>| g.as_ref().map_or(0, SeGate::macs);
        match self {
            Self::Shallow(p) => {
                p.expand.macs(h, w) + p.depthwise.macs(h, w) + se(&p.se) + p.project.macs(h, w)
            }
            Self::Deep(p) => {
                p.recombine.macs(h, w)
                    + p.depthwise.macs(h, w)
                    + p.pointwise.macs(h, w)
                    + se(&p.se)
                    + p.project.macs(h, w)
            }
        }
    }

    pub fn project(&self) -> &Conv2d<T> {
        match self {
            Self::Shallow(p) => &p.project,
            Self::Deep(p) => &p.project,
        }
    }

    pub fn project_mut(&mut self) -> &mut Conv2d<T> {
        match self {
            Self::Shallow(p) => &mut p.project,
            Self::Deep(p) => &mut p.project,
        }
    }
}

/// `X + update(X)` with the update path of the built variant.
pub fn sase_forward<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    x: Var<'t, T>,
    p: &SaseParams<T>,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if let [_, c, h, w] = shape[..] {
        if select_mode(c, h, w) != p.mode() {
            return Err(Error::Shape(format!(
                "{:?} SASE applied to a {c}x{h}x{w} map, which selects {:?}",
                p.mode(),
                select_mode(c, h, w)
            )));
        }
    }
    let update = match p {
        SaseParams::Shallow(p) => {
            let y = p.bn1.forward(ctx, p.expand.forward(ctx, x)?)?.relu();
            let y = p.bn2.forward(ctx, p.depthwise.forward(ctx, y)?)?.relu();
            p.project.forward(ctx, gated(ctx, y, &p.se)?)?
        }
        SaseParams::Deep(p) => {
            let y = p.bn1.forward(ctx, p.recombine.forward(ctx, x)?)?.relu();
            let y = p.pointwise.forward(ctx, p.depthwise.forward(ctx, y)?)?;
            let y = p.bn2.forward(ctx, y)?.relu();
            p.project.forward(ctx, gated(ctx, y, &p.se)?)?
        }
    };
    x.add(update)
}
