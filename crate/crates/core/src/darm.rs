//! Direction-adaptive RWKV module: four-way scan expansion with per-direction
//! spatial mixing, pixel-wise averaging and a channel-mixing stage.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{impl_module, Conv2d, Ctx, Param};
use crate::quadscan::ScanDirection;
use crate::rwkv::{
    channel_mix, spatial_mix, ChannelMixParams, SpatialMixParams, CHANNEL_MIX_RATIO,
};
use crate::tensor::{Conv2dSpec, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct DarmParams<T> {
    /// 1x1 patch embedding.
    pub patch_embed: Conv2d<T>,
    /// One set per direction, or a single set shared by all directions.
    pub spatial: Vec<SpatialMixParams<T>>,
    pub channel: ChannelMixParams<T>,
    /// Logits of the per-channel Q-shift blend applied before scanning.
    pub qshift: Option<Param<T>>,
    pub directions: Vec<ScanDirection>,
}

impl_module!(DarmParams {
    patch_embed,
    spatial,
    channel,
    qshift
});

/// Build options for [`DarmParams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DarmOptions {
    pub directions: Vec<ScanDirection>,
    /// Share one set of spatial-mixing weights across all directions.
    pub tied: bool,
    /// Blend each pixel with its neighbors before scanning.
    pub qshift: bool,
}

impl Default for DarmOptions {
    fn default() -> Self {
        Self {
            directions: ScanDirection::ALL.to_vec(),
            tied: false,
            qshift: false,
        }
    }
}

impl<T: Scalar> DarmParams<T> {
    pub fn new(c: usize, opts: &DarmOptions, rng: &mut impl Rng) -> Result<Self> {
        if opts.directions.is_empty() {
            return Err(Error::Config(
                "DARM needs at least one scan direction".into(),
            ));
        }
        if opts.qshift && !c.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "Q-shift needs channels divisible by 4, got {c}"
            )));
        }
        let patch_embed = Conv2d::new(c, c, 1, Conv2dSpec::default(), true, rng);
        let sets = if opts.tied { 1 } else { opts.directions.len() };
        let spatial = (0..sets).map(|_| SpatialMixParams::new(c, rng)).collect();
        let channel = ChannelMixParams::new(c, CHANNEL_MIX_RATIO, rng)?;
        // Logit -2 starts the blend near 0.12.
        let qshift = opts
            .qshift
            .then(|| Param::new(Tensor::full([c], T::from_f64_lossy(-2.0))));
        Ok(Self {
            patch_embed,
            spatial,
            channel,
            qshift,
            directions: opts.directions.clone(),
        })
    }

    pub fn channels(&self) -> usize {
        self.patch_embed.out_channels()
    }

    /// Spatial-mixing weights used for the `i`-th direction.
    pub fn spatial_for(&self, i: usize) -> &SpatialMixParams<T> {
        &self.spatial[if self.spatial.len() == 1 { 0 } else { i }]
    }

    pub fn is_tied(&self) -> bool {
        self.spatial.len() == 1 && self.directions.len() > 1
    }

    /// Multiply-accumulates on an `h x w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let t = h * w;
        let spatial: u64 = (0..self.directions.len())
            .map(|i| self.spatial_for(i).macs(t))
            .sum();
        self.patch_embed.macs(h, w) + spatial + self.channel.macs(t)
    }
}

/// Adds a batch axis to `[C, H, W]` inputs; returns whether one was added.
fn batched<'t, T: Scalar>(x: Var<'t, T>) -> Result<(Var<'t, T>, bool)> {
    match x.shape()[..] {
        [c, h, w] => Ok((x.reshape([1, c, h, w])?, true)),
        [_, _, _, _] => Ok((x, false)),
        ref s => shape_err(format!("DARM expects [C, H, W] or [N, C, H, W], got {s:?}")),
    }
}

fn unbatched<'t, T: Scalar>(x: Var<'t, T>, squeeze: bool) -> Result<Var<'t, T>> {
    if squeeze {
        let s = x.shape();
        x.reshape(&s[1..])
    } else {
        Ok(x)
    }
}

/// Mean over the configured directions of `unscan(spatial_mix(scan(E, d)), d)`.
pub fn quadscan_mix<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    e: Var<'t, T>,
    p: &DarmParams<T>,
) -> Result<Var<'t, T>> {
    let shape = e.shape();
    let (c, h, w) = match shape[..] {
        [c, h, w] | [_, c, h, w] => (c, h, w),
        _ => return shape_err(format!("quadscan_mix expects a feature map, got {shape:?}")),
    };
    if c != p.channels() {
        return shape_err(format!(
            "quadscan_mix on {c} channels with {}-channel parameters",
            p.channels()
        ));
    }
    let src = match &p.qshift {
        Some(mix) => e.qshift(ctx.param(mix).sigmoid())?,
        None => e,
    };
    let mut total: Option<Var<'t, T>> = None;
    for (i, &d) in p.directions.iter().enumerate() {
        let mixed = spatial_mix(ctx, src.scan(d)?, p.spatial_for(i))?.unscan(d, h, w)?;
        total = Some(match total {
            Some(acc) => acc.add(mixed)?,
            None => mixed,
        });
    }
    let n = T::from_usize(p.directions.len()).expect("count");
    Ok(total.expect("at least one direction").scale(T::one() / n))
}

/// Patch embedding, residual direction mixing, then residual channel mixing.
pub fn darm_forward<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    e: Var<'t, T>,
    p: &DarmParams<T>,
) -> Result<Var<'t, T>> {
    let (e, squeeze) = batched(e)?;
    let [_, _, h, w] = e.shape()[..] else {
        unreachable!()
    };
    let x = p.patch_embed.forward(ctx, e)?;
    let x = x.add(quadscan_mix(ctx, x, p)?)?;
    let seq = x.scan(ScanDirection::LR)?;
    let seq = seq.add(channel_mix(ctx, seq, &p.channel)?)?;
    unbatched(seq.unscan(ScanDirection::LR, h, w)?, squeeze)
}

/// Forward mixing plus reverse mixing with separate weights.
pub fn dual_rwkv<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    seq: Var<'t, T>,
    fwd: &SpatialMixParams<T>,
    rev: &SpatialMixParams<T>,
) -> Result<Var<'t, T>> {
    let a = spatial_mix(ctx, seq, fwd)?;
    let b = spatial_mix(ctx, seq.reverse_tokens()?, rev)?.reverse_tokens()?;
    a.add(b)
}
