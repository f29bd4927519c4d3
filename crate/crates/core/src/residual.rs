//! Residual functions built from pre-activated convolutions, `conv(relu(bn(x)))`.
//!
//! A forward call can keep a [`FnTrace`] of the activations its vjp needs;
//! every traced buffer is registered with the run's memory meter and released
//! as soon as the vjp has consumed it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    batchnorm, batchnorm_madds, batchnorm_vjp, batchnorm_vjp_madds, conv2d, conv2d_madds, conv2d_vjp, conv2d_vjp_madds, relu, relu_vjp,
    BatchStats, BnMode, BnParams, ConvParams,
};
use crate::metrics::{Ctx, Held};
use crate::tensor::{Scalar, Shape, Tensor};

pub(crate) const ACT: &str = "activation";
pub(crate) const GRAD: &str = "activation-grad";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    /// c3(c3(x))
    Basic,
    /// c1(c3(c1(x)))
    Bottleneck,
    Custom,
}

/// How the final convolution of a freshly built function is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Init {
    /// Zero the last conv so the function starts as the zero map.
    pub zero_last: bool,
}

impl Default for Init {
    fn default() -> Self {
        Init { zero_last: true }
    }
}

/// One `conv(relu(bn(x)))` stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PreActConv<T> {
    pub bn: BnParams<T>,
    pub conv: ConvParams<T>,
}

#[derive(Clone, Debug)]
pub enum BnSource<'a, T> {
    Train,
    Replay(&'a [BatchStats<T>]),
}

#[derive(Debug)]
struct UnitTrace<T> {
    input: Held<T>,
    bn_out: Held<T>,
    act: Held<T>,
    stats: BatchStats<T>,
}

/// Activations retained by a traced forward call.
#[derive(Debug)]
pub struct FnTrace<T> {
    units: Vec<UnitTrace<T>>,
}

/// Traces of the F and G functions of one block.
pub type TracePair<T> = (FnTrace<T>, FnTrace<T>);

impl<T: Scalar> FnTrace<T> {
    pub fn bytes(&self) -> usize {
        self.units.iter().map(|u| u.input.bytes() + u.bn_out.bytes() + u.act.bytes()).sum()
    }

    pub fn tensor_count(&self) -> usize {
        3 * self.units.len()
    }

    pub fn stats(&self) -> Vec<BatchStats<T>> {
        self.units.iter().map(|u| u.stats.clone()).collect()
    }

    /// Releases the trace without running a vjp.
    pub fn discard(self, ctx: &mut Ctx) -> Result<()> {
        for u in self.units {
            ctx.discard(u.input)?;
            ctx.discard(u.bn_out)?;
            ctx.discard(u.act)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualFn<T> {
    pub kind: ResidualKind,
    pub units: Vec<PreActConv<T>>,
    /// Batch statistics from the most recent train-mode forward, one per unit.
    pub cached_stats: Option<Vec<BatchStats<T>>>,
}

impl<T: Scalar> ResidualFn<T> {
    pub fn custom(units: Vec<PreActConv<T>>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::InvalidSpec("residual function needs at least one unit".into()));
        }
        for pair in units.windows(2) {
            if pair[0].conv.c_out() != pair[1].bn.channels() {
                return Err(Error::shape(
                    "ResidualFn",
                    "unit channels",
                    pair[0].conv.c_out(),
                    pair[1].bn.channels(),
                ));
            }
        }
        for u in &units {
            if u.bn.channels() != u.conv.c_in() {
                return Err(Error::shape("ResidualFn", "bn channels", u.conv.c_in(), u.bn.channels()));
            }
        }
        Ok(ResidualFn {
            kind: ResidualKind::Custom,
            units,
            cached_stats: None,
        })
    }

    fn unit<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, zero: bool, rng: &mut R) -> PreActConv<T> {
        PreActConv {
            bn: BnParams::identity(c_in),
            conv: if zero {
                ConvParams::zeros(c_in, c_out, k, stride)
            } else {
                ConvParams::he(c_in, c_out, k, stride, rng)
            },
        }
    }

    /// Two 3x3 pre-activated convs; `stride` applies to the first.
    pub fn basic<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, init: Init, rng: &mut R) -> Self {
        let units = vec![
            Self::unit(c_in, c_out, 3, stride, false, rng),
            Self::unit(c_out, c_out, 3, 1, init.zero_last, rng),
        ];
        ResidualFn {
            kind: ResidualKind::Basic,
            units,
            cached_stats: None,
        }
    }

    /// 1x1 reduce, 3x3 (carrying `stride`), 1x1 expand.
    pub fn bottleneck<R: Rng + ?Sized>(c_in: usize, inner: usize, c_out: usize, stride: usize, init: Init, rng: &mut R) -> Self {
        let units = vec![
            Self::unit(c_in, inner, 1, 1, false, rng),
            Self::unit(inner, inner, 3, stride, false, rng),
            Self::unit(inner, c_out, 1, 1, init.zero_last, rng),
        ];
        ResidualFn {
            kind: ResidualKind::Bottleneck,
            units,
            cached_stats: None,
        }
    }

    pub fn c_in(&self) -> usize {
        self.units[0].bn.channels()
    }

    pub fn c_out(&self) -> usize {
        self.units[self.units.len() - 1].conv.c_out()
    }

    pub fn stride(&self) -> usize {
        self.units.iter().map(|u| u.conv.stride).product()
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        self.units.iter().try_fold(input, |s, u| u.conv.out_shape(s))
    }

    pub fn num_params(&self) -> usize {
        self.units.iter().map(|u| u.bn.num_params() + u.conv.num_params()).sum()
    }

    /// Parameters in the order `gamma, beta, weight[, bias]` per unit.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for u in &self.units {
            out.push(&u.bn.gamma);
            out.push(&u.bn.beta);
            out.push(&u.conv.weight);
            if let Some(b) = &u.conv.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for u in &mut self.units {
            out.push(&mut u.bn.gamma);
            out.push(&mut u.bn.beta);
            out.push(&mut u.conv.weight);
            if let Some(b) = &mut u.conv.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            out.push(format!("unit{i}.bn.gamma"));
            out.push(format!("unit{i}.bn.beta"));
            out.push(format!("unit{i}.conv.weight"));
            if u.conv.bias.is_some() {
                out.push(format!("unit{i}.conv.bias"));
            }
        }
        out
    }

    /// Bytes a traced forward retains for an input of this shape.
    pub fn trace_bytes(&self, input: Shape) -> Result<usize> {
        let mut s = input;
        let mut total = 0;
        for u in &self.units {
            total += 3 * s.numel() * T::BYTES;
            s = u.conv.out_shape(s)?;
        }
        Ok(total)
    }

    fn stats_for<'a>(&self, bn: &BnSource<'a, T>, i: usize) -> Result<BnMode<'a, T>> {
        match bn {
            BnSource::Train => Ok(BnMode::Train),
            BnSource::Replay(stats) => {
                if stats.len() != self.units.len() {
                    return Err(Error::shape("ResidualFn replay", "stats entries", self.units.len(), stats.len()));
                }
                Ok(BnMode::Replay(&stats[i]))
            }
        }
    }

    /// Forward pass that keeps the activations needed by [`ResidualFn::vjp`].
    pub fn forward(&self, x: &Tensor<T>, bn: BnSource<'_, T>, ctx: &mut Ctx) -> Result<(Tensor<T>, FnTrace<T>)> {
        let mut units = Vec::with_capacity(self.units.len());
        let mut cur = x.clone();
        for (i, u) in self.units.iter().enumerate() {
            let mode = self.stats_for(&bn, i)?;
            let (bn_out, stats) = batchnorm(&cur, &u.bn, mode)?;
            ctx.charge(batchnorm_madds(cur.shape(), matches!(mode, BnMode::Train)));
            ctx.observe_relu(&bn_out);
            let act = relu(&bn_out);
            let next = conv2d(&act, &u.conv)?;
            ctx.charge(conv2d_madds(act.shape(), &u.conv)?);
            units.push(UnitTrace {
                input: ctx.hold(ACT, cur),
                bn_out: ctx.hold(ACT, bn_out),
                act: ctx.hold(ACT, act),
                stats,
            });
            cur = next;
        }
        Ok((cur, FnTrace { units }))
    }

    /// Forward pass that keeps nothing beyond the current stage.
    pub fn eval(&self, x: &Tensor<T>, bn: BnSource<'_, T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Vec<BatchStats<T>>)> {
        let mut all_stats = Vec::with_capacity(self.units.len());
        let mut cur: Option<Held<T>> = None;
        for (i, u) in self.units.iter().enumerate() {
            let mode = self.stats_for(&bn, i)?;
            let input = cur.as_deref().unwrap_or(x);
            let (bn_out, stats) = batchnorm(input, &u.bn, mode)?;
            ctx.charge(batchnorm_madds(input.shape(), matches!(mode, BnMode::Train)));
            ctx.observe_relu(&bn_out);
            let bn_out = ctx.hold(ACT, bn_out);
            let act = ctx.hold(ACT, relu(&bn_out));
            ctx.discard(bn_out)?;
            let next = conv2d(&act, &u.conv)?;
            ctx.charge(conv2d_madds(act.shape(), &u.conv)?);
            ctx.discard(act)?;
            if let Some(prev) = cur.take() {
                ctx.discard(prev)?;
            }
            cur = Some(ctx.hold(ACT, next));
            all_stats.push(stats);
        }
        let out = ctx.release(cur.expect("at least one unit"))?;
        Ok((out, all_stats))
    }

    /// Vector-Jacobian product through a traced forward. Consumes the trace.
    /// Returns the input cotangent and parameter gradients in [`ResidualFn::params`] order.
    pub fn vjp(&self, trace: FnTrace<T>, dy: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if trace.units.len() != self.units.len() {
            return Err(Error::shape("ResidualFn::vjp", "trace units", self.units.len(), trace.units.len()));
        }
        let mut per_unit = Vec::with_capacity(self.units.len());
        let mut grad: Option<Held<T>> = None;
        for (u, t) in self.units.iter().zip(trace.units).rev() {
            let g = conv2d_vjp(&t.act, &u.conv, grad.as_deref().unwrap_or(dy))?;
            ctx.charge(conv2d_vjp_madds(t.act.shape(), &u.conv)?);
            if let Some(prev) = grad.take() {
                ctx.discard(prev)?;
            }
            let d_act = ctx.hold(GRAD, g.dx);
            ctx.discard(t.act)?;
            let d_bn = ctx.hold(GRAD, relu_vjp(&t.bn_out, &d_act)?);
            ctx.discard(d_act)?;
            ctx.discard(t.bn_out)?;
            let b = batchnorm_vjp(&t.input, &u.bn, &t.stats, &d_bn)?;
            ctx.charge(batchnorm_vjp_madds(t.input.shape()));
            ctx.discard(d_bn)?;
            ctx.discard(t.input)?;
            grad = Some(ctx.hold(GRAD, b.dx));
            let mut p = vec![b.dgamma, b.dbeta, g.dw];
            if u.conv.bias.is_some() {
                p.push(g.db);
            }
            per_unit.push(p);
        }
        per_unit.reverse();
        let dx = ctx.release(grad.expect("at least one unit"))?;
        Ok((dx, per_unit.into_iter().flatten().collect()))
    }
}
