//! Parameters, module traversal and the common layers.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{BnMode, Conv2dSpec, Gradients, Scalar, Tape, Tensor, Var, BN_MOMENTUM};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Learnable tensor with an additive gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    id: u64,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                if g.shape() != self.value.shape() {
                    return shape_err(format!(
                        "gradient {:?} for parameter {:?}",
                        g.shape(),
                        self.value.shape()
                    ));
                }
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Non-learnable state updated during training (batch-norm running statistics).
#[derive(Debug)]
pub struct Buffer<T>(RwLock<Tensor<T>>);

impl<T: Scalar> Buffer<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self(RwLock::new(value))
    }

    pub fn get(&self) -> Tensor<T> {
        self.0.read().expect("buffer lock").clone()
    }

    pub fn set(&self, value: Tensor<T>) {
        *self.0.write().expect("buffer lock") = value;
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Self(RwLock::new(self.0.read().expect("buffer lock").clone()))
    }
}

/// A named entry reached while walking a module tree.
pub enum Slot<'a, T> {
    Param(&'a Param<T>),
    Buffer(&'a Buffer<T>),
}

/// Walks the parameters and buffers of a module tree in a fixed order.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'a, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// Number of learnable scalars. Shared parameters are visited once.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.numel();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Module<T> for Param<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'a, T>)) {
        f(prefix, Slot::Param(self));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self);
    }
}

impl<T: Scalar> Module<T> for Buffer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'a, T>)) {
        f(prefix, Slot::Buffer(self));
    }

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'a, T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'a, T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, $crate::nn::Slot<'a, T>),
            ) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::nn::Param<T>),
            ) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
#[allow(unused_imports)]
pub(crate) use impl_module;

/// Forward-pass context: the tape, the train/eval switch, and the mapping
/// from parameters to their leaves on the tape.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub training: bool,
    track_params: bool,
    leaves: RefCell<HashMap<u64, Var<'t, T>>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, training: bool, track_params: bool) -> Self {
        Self {
            tape,
            training,
            track_params,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// Training mode with parameter gradients.
    pub fn train(tape: &'t Tape<T>) -> Self {
        Self::new(tape, true, true)
    }

    /// Inference mode; parameters are recorded as constants.
    pub fn eval(tape: &'t Tape<T>) -> Self {
        Self::new(tape, false, false)
    }

    /// Leaf for `p`, created on first use. Repeated uses share one leaf, so a
    /// parameter reused in several places receives the summed gradient.
    pub fn param(&self, p: &Param<T>) -> Var<'t, T> {
        *self.leaves.borrow_mut().entry(p.id()).or_insert_with(|| {
            self.tape
                .leaf(p.value.clone(), self.track_params && p.requires_grad)
        })
    }

    /// Substitutes `var` for `p` in subsequent forward calls.
    pub fn bind(&self, p: &Param<T>, var: Var<'t, T>) -> Result<()> {
        if var.shape() != p.value.shape() {
            return shape_err(format!(
                "bind {:?} to parameter {:?}",
                var.shape(),
                p.value.shape()
            ));
        }
        self.leaves.borrow_mut().insert(p.id(), var);
        Ok(())
    }

    /// Adds the gradients of every parameter used in this context into `module`.
    pub fn accumulate_grads<M: Module<T> + ?Sized>(
        &self,
        module: &mut M,
        grads: &Gradients<T>,
    ) -> Result<()> {
        let leaves = self.leaves.borrow();
        let mut result = Ok(());
        module.visit_mut("", &mut |_, p| {
            if let Some(g) = leaves.get(&p.id()).and_then(|&v| grads.get(v)) {
                if result.is_ok() {
                    result = p.accumulate_grad(g);
                }
            }
        });
        result
    }
}

fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// 2D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: Conv2dSpec,
}

impl_module!(Conv2d { weight, bias });

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let weight = kaiming(&[cout, cin_g, kernel, kernel], cin_g * kernel * kernel, rng);
        Self {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros([cout]))),
            spec,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1] * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        x.conv2d(ctx.param(&self.weight), b, self.spec)
    }

    /// Multiply-accumulate count for an output of `oh x ow`.
    pub fn macs(&self, oh: usize, ow: usize) -> u64 {
        let [cout, cin_g, kh, kw] = self.weight.value.shape()[..] else {
            unreachable!()
        };
        (cout * cin_g * kh * kw * oh * ow) as u64
    }
}

/// Transposed 2D convolution layer.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
}

impl_module!(ConvTranspose2d { weight, bias });

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1);
        Self {
            weight: Param::new(kaiming(&[cin, cout, kernel, kernel], fan_in, rng)),
            bias: Some(Param::new(Tensor::zeros([cout]))),
            stride,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        x.conv_transpose2d(ctx.param(&self.weight), b, self.stride, 0)
    }

    /// Multiply-accumulate count for an input of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.weight.numel() * h * w) as u64
    }
}

/// Batch normalization over `[N, C, H, W]` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
}

impl_module!(BatchNorm2d {
    gamma,
    beta,
    running_mean,
    running_var
});

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones([channels])),
            beta: Param::new(Tensor::zeros([channels])),
            running_mean: Buffer::new(Tensor::zeros([channels])),
            running_var: Buffer::new(Tensor::ones([channels])),
        }
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running averages with momentum 0.1; eval mode uses the running averages.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (g, b) = (ctx.param(&self.gamma), ctx.param(&self.beta));
        if ctx.training {
            let (y, stats) = x.batch_norm(g, b, BnMode::Train)?;
            let stats = stats.expect("training mode yields statistics");
            let mom = T::from_f64_lossy(BN_MOMENTUM);
            let blend = |buf: &Buffer<T>, batch: &[T]| {
                let mut cur = buf.get();
                for (r, &v) in cur.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - mom) * *r + mom * v;
                }
                buf.set(cur);
            };
            blend(&self.running_mean, &stats.mean);
            blend(&self.running_var, &stats.var);
            Ok(y)
        } else {
            let (m, v) = (self.running_mean.get(), self.running_var.get());
            Ok(x.batch_norm(g, b, BnMode::Eval(m.data(), v.data()))?.0)
        }
    }
}

/// Layer normalization over the trailing feature axis.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl_module!(LayerNorm { gamma, beta });

impl<T: Scalar> LayerNorm<T> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones([features])),
            beta: Param::new(Tensor::zeros([features])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(ctx.param(&self.gamma), ctx.param(&self.beta))
    }
}

/// `[in, out]` projection matrix with the usual `U(±1/√in)` initialization.
pub fn projection<T: Scalar>(cin: usize, cout: usize, rng: &mut impl Rng) -> Param<T> {
    let bound = 1.0 / (cin as f64).sqrt();
    Param::new(Tensor::uniform([cin, cout], -bound, bound, rng))
}
