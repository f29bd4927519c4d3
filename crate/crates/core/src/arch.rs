//! ResNet and RevNet builders, parameter counting, and whole-network
//! forward/backward under either engine.
//!
//! A RevNet group whose input differs in width or resolution from its body
//! opens with a transition unit. The transition has the same two-half
//! coupling layout as a reversible block, but its F carries the stride and the
//! halves reach the new width through shortcuts, so it cannot be inverted and
//! its input is saved. The remaining units of the group form one reversible
//! span.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coupling::{merge_halves, split_channels, ReversibleBlock};
use crate::error::{Error, Result};
use crate::kernels::{
    avg_pool2, avg_pool2_vjp, batchnorm, batchnorm_madds, batchnorm_vjp, batchnorm_vjp_madds, conv2d, conv2d_madds, conv2d_vjp,
    conv2d_vjp_madds, pad_channels, pad_channels_vjp, pool_and_head, pool_and_head_madds, pool_and_head_vjp, relu, relu_vjp, softmax_xent,
    BatchStats, BnMode, BnParams, ConvParams, LinearParams,
};
use crate::metrics::{Ctx, Held, Phase};
use crate::residual::{BnSource, FnTrace, Init, ResidualFn, TracePair, ACT, GRAD};
use crate::revgrad::{stack_backward_held, stack_forward, stored_backward_held, stored_forward, StackCheckpoint, StoredTape, CKPT};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Resnet,
    Revnet,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Resnet => "resnet",
            Family::Revnet => "revnet",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Family::Resnet),
            "revnet" => Ok(Family::Revnet),
            _ => Err(Error::Config(format!("unknown family `{s}` (expected resnet or revnet)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub family: Family,
    pub bottleneck: bool,
    /// Units per group.
    pub units: Vec<usize>,
    /// Stem width followed by one width per group.
    pub channels: Vec<usize>,
    pub classes: usize,
    /// (c, h, w)
    pub input_shape: (usize, usize, usize),
}

impl ArchSpec {
    /// CIFAR-10 shaped presets: resnet-32, resnet-110, resnet-164, revnet-38, revnet-110, revnet-164.
    pub fn preset(name: &str) -> Option<ArchSpec> {
        let (family, bottleneck, units, channels): (Family, bool, [usize; 3], [usize; 4]) = match name {
            "resnet-32" => (Family::Resnet, false, [5, 5, 5], [16, 16, 32, 64]),
            "resnet-110" => (Family::Resnet, false, [18, 18, 18], [16, 16, 32, 64]),
            "resnet-164" => (Family::Resnet, true, [18, 18, 18], [16, 16, 32, 64]),
            "revnet-38" => (Family::Revnet, false, [3, 3, 3], [32, 32, 64, 112]),
            "revnet-110" => (Family::Revnet, false, [9, 9, 9], [32, 32, 64, 128]),
            "revnet-164" => (Family::Revnet, true, [9, 9, 9], [32, 32, 64, 128]),
            _ => return None,
        };
        Some(ArchSpec {
            family,
            bottleneck,
            units: units.to_vec(),
            channels: channels.to_vec(),
            classes: 10,
            input_shape: (3, 32, 32),
        })
    }

    pub fn groups(&self) -> usize {
        self.units.len()
    }

    /// Output width of group `g`.
    pub fn group_width(&self, g: usize) -> usize {
        if self.bottleneck {
            4 * self.channels[g + 1]
        } else {
            self.channels[g + 1]
        }
    }

    fn inner_width(&self, g: usize) -> usize {
        match self.family {
            Family::Resnet => self.channels[g + 1],
            Family::Revnet => self.channels[g + 1] / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.units.is_empty() {
            return bad("at least one group is required".into());
        }
        if self.channels.len() != self.units.len() + 1 {
            return bad(format!(
                "channels needs {} entries (stem + one per group), got {}",
                self.units.len() + 1,
                self.channels.len()
            ));
        }
        if let Some(g) = self.units.iter().position(|&u| u == 0) {
            return bad(format!("group {g} is empty"));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.classes == 0 {
            return bad("classes must be positive".into());
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("input shape {c}x{h}x{w} has an empty dimension"));
        }
        let down = 1usize << (self.groups() - 1);
        if h % down != 0 || w % down != 0 {
            return bad(format!("input {h}x{w} is not divisible by {down} for {} groups", self.groups()));
        }
        if self.family == Family::Revnet {
            if !self.channels[0].is_multiple_of(2) {
                return Err(Error::OddChannels {
                    channels: self.channels[0],
                });
            }
            for g in 0..self.groups() {
                let wd = self.group_width(g);
                if !wd.is_multiple_of(2) {
                    return Err(Error::OddChannels { channels: wd });
                }
                if self.bottleneck && self.inner_width(g) == 0 {
                    return bad(format!("group {g} bottleneck width is zero"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub seed: u64,
    /// Zero the final conv of every residual function.
    pub zero_init_residual: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            seed: 0,
            zero_init_residual: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    /// Save only span boundaries and non-reversible inputs; reconstruct the rest.
    Reversible,
    /// Keep every activation.
    Stored,
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reversible" => Ok(Engine::Reversible),
            "stored" => Ok(Engine::Stored),
            _ => Err(Error::Config(format!("unknown engine `{s}` (expected reversible or stored)"))),
        }
    }
}

/// Parameter-free or 1x1 projection path around a residual function.
#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut<T> {
    Identity,
    /// 2x2 average pool when `stride` is 2, then zero channels up to `c_out`.
    PoolPad {
        stride: usize,
        c_out: usize,
    },
    Projection(ConvParams<T>),
}

impl<T: Scalar> Shortcut<T> {
    fn make<R: rand::Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, project: bool, rng: &mut R) -> Self {
        if c_in == c_out && stride == 1 {
            Shortcut::Identity
        } else if project || c_out < c_in {
            Shortcut::Projection(ConvParams::he(c_in, c_out, 1, stride, rng))
        } else {
            Shortcut::PoolPad { stride, c_out }
        }
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Shortcut::Projection(p) => vec![&p.weight],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Shortcut::Projection(p) => vec![&mut p.weight],
            _ => vec![],
        }
    }

    fn apply(&self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        match self {
            Shortcut::Identity => Ok(x.clone()),
            Shortcut::PoolPad { stride, c_out } => {
                let pooled = if *stride == 2 {
                    ctx.charge(x.len() as u64);
                    avg_pool2(x)?
                } else {
                    x.clone()
                };
                pad_channels(&pooled, *c_out)
            }
            Shortcut::Projection(p) => {
                ctx.charge(conv2d_madds(x.shape(), p)?);
                conv2d(x, p)
            }
        }
    }

    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        match self {
            Shortcut::Identity => Ok((dy.clone(), vec![])),
            Shortcut::PoolPad { stride, .. } => {
                let d = pad_channels_vjp(dy, x.shape().c)?;
                if *stride == 2 {
                    ctx.charge(x.len() as u64);
                    Ok((avg_pool2_vjp(x.shape(), &d)?, vec![]))
                } else {
                    Ok((d, vec![]))
                }
            }
            Shortcut::Projection(p) => {
                ctx.charge(conv2d_vjp_madds(x.shape(), p)?);
                let g = conv2d_vjp(x, p, dy)?;
                Ok((g.dx, vec![g.dw]))
            }
        }
    }
}

/// `y = shortcut(x) + F(x)`
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub f: ResidualFn<T>,
    pub shortcut: Shortcut<T>,
}

/// Downsampling or widening unit acting on channel halves:
/// `z1 = s1(x1) + F(x2)`, `y2 = s2(x2) + G(z1)`, output `[z1, y2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<T> {
    pub f: ResidualFn<T>,
    pub g: ResidualFn<T>,
    pub s1: Shortcut<T>,
    pub s2: Shortcut<T>,
}

#[derive(Debug)]
pub struct TransitionTrace<T> {
    input: Held<T>,
    f: FnTrace<T>,
    g: FnTrace<T>,
}

impl<T: Scalar> Transition<T> {
    fn forward_parts(&self, x: &Tensor<T>, traced: bool, ctx: &mut Ctx) -> Result<(Tensor<T>, Option<TracePair<T>>)> {
        let p = split_channels(x)?;
        let (f_out, f_tr) = if traced {
            let (o, t) = self.f.forward(&p.x2, BnSource::Train, ctx)?;
            (o, Some(t))
        } else {
            (self.f.eval(&p.x2, BnSource::Train, ctx)?.0, None)
        };
        let z1 = self.s1.apply(&p.x1, ctx)?.add(&f_out)?;
        let (g_out, g_tr) = if traced {
            let (o, t) = self.g.forward(&z1, BnSource::Train, ctx)?;
            (o, Some(t))
        } else {
            (self.g.eval(&z1, BnSource::Train, ctx)?.0, None)
        };
        let y2 = self.s2.apply(&p.x2, ctx)?.add(&g_out)?;
        Ok((merge_halves(&z1, &y2)?, f_tr.zip(g_tr)))
    }

    pub fn eval(&self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        Ok(self.forward_parts(x, false, ctx)?.0)
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, TransitionTrace<T>)> {
        let (out, traces) = self.forward_parts(x, true, ctx)?;
        let (f, g) = traces.expect("traced forward");
        Ok((
            out,
            TransitionTrace {
                input: ctx.hold(ACT, x.clone()),
                f,
                g,
            },
        ))
    }

    /// Returns the input cotangent and grads in [`Transition::params`] order.
    pub fn vjp(&self, trace: TransitionTrace<T>, dy: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let d = split_channels(dy)?;
        let (g_dx, dwg) = self.g.vjp(trace.g, &d.x2, ctx)?;
        let dz1 = d.x1.add(&g_dx)?;
        let (f_dx, dwf) = self.f.vjp(trace.f, &dz1, ctx)?;
        let x = ctx.release(trace.input)?;
        let p = split_channels(&x)?;
        let (s1_dx, ds1) = self.s1.vjp(&p.x1, &dz1, ctx)?;
        let (s2_dx, ds2) = self.s2.vjp(&p.x2, &d.x2, ctx)?;
        let dx = merge_halves(&s1_dx, &s2_dx.add(&f_dx)?)?;
        let mut grads = dwf;
        grads.extend(dwg);
        grads.extend(ds1);
        grads.extend(ds2);
        Ok((dx, grads))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.f.params();
        p.extend(self.g.params());
        p.extend(self.s1.params());
        p.extend(self.s2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.f.params_mut();
        p.extend(self.g.params_mut());
        p.extend(self.s1.params_mut());
        p.extend(self.s2.params_mut());
        p
    }
}

/// BN, ReLU, global average pool, linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub bn: BnParams<T>,
    pub fc: LinearParams<T>,
}

#[derive(Debug)]
pub struct HeadTrace<T> {
    input: Held<T>,
    bn_out: Held<T>,
    act: Held<T>,
    stats: BatchStats<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Stem(ConvParams<T>),
    Span(Vec<ReversibleBlock<T>>),
    Residual(ResidualBlock<T>),
    Transition(Transition<T>),
    Head(Head<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Stem(p) => std::iter::once(&p.weight).chain(p.bias.as_ref()).collect(),
            Layer::Span(blocks) => blocks.iter().flat_map(|b| b.params()).collect(),
            Layer::Residual(r) => {
                let mut p = r.f.params();
                p.extend(r.shortcut.params());
                p
            }
            Layer::Transition(t) => t.params(),
            Layer::Head(h) => vec![&h.bn.gamma, &h.bn.beta, &h.fc.weight, &h.fc.bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Stem(p) => std::iter::once(&mut p.weight).chain(p.bias.as_mut()).collect(),
            Layer::Span(blocks) => blocks.iter_mut().flat_map(|b| b.params_mut()).collect(),
            Layer::Residual(r) => {
                let mut p = r.f.params_mut();
                p.extend(r.shortcut.params_mut());
                p
            }
            Layer::Transition(t) => t.params_mut(),
            Layer::Head(h) => vec![&mut h.bn.gamma, &mut h.bn.beta, &mut h.fc.weight, &mut h.fc.bias],
        }
    }

    fn param_names(&self) -> Vec<String> {
        let pre = |p: &str, names: Vec<String>| names.into_iter().map(|n| format!("{p}.{n}")).collect::<Vec<_>>();
        match self {
            Layer::Stem(p) => {
                let mut n = vec!["weight".to_string()];
                if p.bias.is_some() {
                    n.push("bias".into());
                }
                n
            }
            Layer::Span(blocks) => blocks
                .iter()
                .enumerate()
                .flat_map(|(j, b)| pre(&format!("block{j}"), b.param_names()))
                .collect(),
            Layer::Residual(r) => {
                let mut n = pre("f", r.f.param_names());
                if matches!(r.shortcut, Shortcut::Projection(_)) {
                    n.push("shortcut.weight".into());
                }
                n
            }
            Layer::Transition(t) => {
                let mut n = pre("f", t.f.param_names());
                n.extend(pre("g", t.g.param_names()));
                for (name, s) in [("s1", &t.s1), ("s2", &t.s2)] {
                    if matches!(s, Shortcut::Projection(_)) {
                        n.push(format!("{name}.weight"));
                    }
                }
                n
            }
            Layer::Head(_) => ["bn.gamma", "bn.beta", "fc.weight", "fc.bias"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug)]
enum LayerSave<T> {
    Stem(Held<T>),
    Residual {
        input: Held<T>,
        trace: FnTrace<T>,
    },
    TransitionInput(Held<T>),
    /// The transition's input travels in the following span's checkpoint.
    Moved,
    TransitionTrace(TransitionTrace<T>),
    Checkpoint(StackCheckpoint<T>),
    Tape(StoredTape<T>),
    Head(HeadTrace<T>),
}

/// Everything a forward pass leaves behind for the backward pass.
#[derive(Debug)]
pub struct ForwardState<T> {
    saves: Vec<LayerSave<T>>,
}

impl<T: Scalar> ForwardState<T> {
    /// Saves that exist because a layer cannot be inverted, plus one per span boundary.
    pub fn checkpoint_count(&self) -> usize {
        self.saves
            .iter()
            .map(|s| match s {
                LayerSave::TransitionInput(_) | LayerSave::TransitionTrace(_) => 1,
                LayerSave::Checkpoint(c) => 1 + c.nonreversible_saves.len(),
                LayerSave::Tape(_) => 1,
                _ => 0,
            })
            .sum()
    }

    /// Number of activation tensors held by the state.
    pub fn stored_tensor_count(&self) -> usize {
        self.saves
            .iter()
            .map(|s| match s {
                LayerSave::Stem(_) | LayerSave::TransitionInput(_) => 1,
                LayerSave::Moved => 0,
                LayerSave::Residual { trace, .. } => 1 + trace.tensor_count(),
                LayerSave::TransitionTrace(t) => 1 + t.f.tensor_count() + t.g.tensor_count(),
                LayerSave::Tape(t) => 2 + t.tensor_count(),
                LayerSave::Checkpoint(c) => 2 + c.nonreversible_saves.len(),
                LayerSave::Head(_) => 3,
            })
            .sum()
    }

    pub fn discard(self, ctx: &mut Ctx) -> Result<()> {
        for s in self.saves {
            match s {
                LayerSave::Stem(h) | LayerSave::TransitionInput(h) => ctx.discard(h)?,
                LayerSave::Moved => {}
                LayerSave::Residual { input, trace } => {
                    ctx.discard(input)?;
                    trace.discard(ctx)?;
                }
                LayerSave::TransitionTrace(t) => {
                    ctx.discard(t.input)?;
                    t.f.discard(ctx)?;
                    t.g.discard(ctx)?;
                }
                LayerSave::Checkpoint(c) => c.discard(ctx)?,
                LayerSave::Tape(t) => {
                    let (y1, y2, traces) = t.into_parts();
                    ctx.discard(y1)?;
                    ctx.discard(y2)?;
                    for (f, g) in traces {
                        f.discard(ctx)?;
                        g.discard(ctx)?;
                    }
                }
                LayerSave::Head(h) => {
                    ctx.discard(h.input)?;
                    ctx.discard(h.bn_out)?;
                    ctx.discard(h.act)?;
                }
            }
        }
        Ok(())
    }
}

/// An ordered list of layers with per-layer parameter name prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPlan<T> {
    pub layers: Vec<Layer<T>>,
    prefixes: Vec<String>,
}

fn state_mismatch() -> Error {
    Error::InvalidSpec("forward state does not belong to this network".into())
}

impl<T: Scalar> NetworkPlan<T> {
    pub fn from_layers(layers: Vec<Layer<T>>) -> Self {
        let prefixes = (0..layers.len()).map(|i| format!("layer{i}")).collect();
        NetworkPlan { layers, prefixes }
    }

    pub fn build(spec: &ArchSpec, opts: BuildOptions) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let init = Init {
            zero_last: opts.zero_init_residual,
        };
        let mut layers = Vec::new();
        let mut prefixes = Vec::new();
        let (c_in, _, _) = spec.input_shape;
        layers.push(Layer::Stem(ConvParams::he(c_in, spec.channels[0], 3, 1, &mut rng)));
        prefixes.push("stem".to_string());
        let mut width = spec.channels[0];
        for g in 0..spec.groups() {
            let out = spec.group_width(g);
            let inner = spec.inner_width(g);
            let down = if g > 0 { 2 } else { 1 };
            match spec.family {
                Family::Resnet => {
                    for u in 0..spec.units[g] {
                        let (cin, stride) = if u == 0 { (width, down) } else { (out, 1) };
                        let f = if spec.bottleneck {
                            ResidualFn::bottleneck(cin, inner, out, stride, init, &mut rng)
                        } else {
                            ResidualFn::basic(cin, out, stride, init, &mut rng)
                        };
                        let shortcut = Shortcut::make(cin, out, stride, spec.bottleneck, &mut rng);
                        layers.push(Layer::Residual(ResidualBlock { f, shortcut }));
                        prefixes.push(format!("group{g}.unit{u}"));
                    }
                }
                Family::Revnet => {
                    let mut body = spec.units[g];
                    if down != 1 || width != out {
                        let (hi, ho) = (width / 2, out / 2);
                        let (f, gf) = if spec.bottleneck {
                            (
                                ResidualFn::bottleneck(hi, inner, ho, down, init, &mut rng),
                                ResidualFn::bottleneck(ho, inner, ho, 1, init, &mut rng),
                            )
                        } else {
                            (
                                ResidualFn::basic(hi, ho, down, init, &mut rng),
                                ResidualFn::basic(ho, ho, 1, init, &mut rng),
                            )
                        };
                        let s1 = Shortcut::make(hi, ho, down, spec.bottleneck, &mut rng);
                        let s2 = Shortcut::make(hi, ho, down, spec.bottleneck, &mut rng);
                        layers.push(Layer::Transition(Transition { f, g: gf, s1, s2 }));
                        prefixes.push(format!("group{g}.transition"));
                        body -= 1;
                    }
                    if body > 0 {
                        let blocks = (0..body)
                            .map(|_| {
                                if spec.bottleneck {
                                    ReversibleBlock::bottleneck(out, inner, init, &mut rng)
                                } else {
                                    ReversibleBlock::basic(out, init, &mut rng)
                                }
                            })
                            .collect::<Result<Vec<_>>>()?;
                        layers.push(Layer::Span(blocks));
                        prefixes.push(format!("group{g}.span"));
                    }
                }
            }
            width = out;
        }
        layers.push(Layer::Head(Head {
            bn: BnParams::identity(width),
            fc: LinearParams::he(width, spec.classes, &mut rng),
        }));
        prefixes.push("head".to_string());
        Ok(NetworkPlan { layers, prefixes })
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// (layer index, block count) of every reversible span.
    pub fn reversible_spans(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Span(b) => Some((i, b.len())),
                _ => None,
            })
            .collect()
    }

    /// Number of layers whose input must be saved because they cannot be inverted.
    pub fn transition_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Transition(_))).count()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .zip(&self.prefixes)
            .flat_map(|(l, p)| l.param_names().into_iter().map(move |n| format!("{p}.{n}")))
            .collect()
    }

    pub fn load_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::shape("load_params", "tensors", slots.len(), values.len()));
        }
        for (dst, src) in slots.iter_mut().zip(values) {
            src.expect_shape(dst.shape(), "load_params")?;
            **dst = src.clone();
        }
        Ok(())
    }

    /// Cast every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkPlan<U> {
        fn conv<T: Scalar, U: Scalar>(p: &ConvParams<T>) -> ConvParams<U> {
            ConvParams {
                weight: p.weight.cast(),
                bias: p.bias.as_ref().map(Tensor::cast),
                stride: p.stride,
                padding: p.padding,
            }
        }
        fn rfn<T: Scalar, U: Scalar>(f: &ResidualFn<T>) -> ResidualFn<U> {
            ResidualFn {
                kind: f.kind,
                units: f
                    .units
                    .iter()
                    .map(|u| crate::residual::PreActConv {
                        bn: BnParams {
                            gamma: u.bn.gamma.cast(),
                            beta: u.bn.beta.cast(),
                        },
                        conv: conv(&u.conv),
                    })
                    .collect(),
                cached_stats: None,
            }
        }
        fn short<T: Scalar, U: Scalar>(s: &Shortcut<T>) -> Shortcut<U> {
            match s {
                Shortcut::Identity => Shortcut::Identity,
                Shortcut::PoolPad { stride, c_out } => Shortcut::PoolPad {
                    stride: *stride,
                    c_out: *c_out,
                },
                Shortcut::Projection(p) => Shortcut::Projection(conv(p)),
            }
        }
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Stem(p) => Layer::Stem(conv(p)),
                Layer::Span(blocks) => Layer::Span(
                    blocks
                        .iter()
                        .map(|b| ReversibleBlock {
                            f: rfn(&b.f),
                            g: rfn(&b.g),
                            coupling: b.coupling,
                            replay: b.replay,
                        })
                        .collect(),
                ),
                Layer::Residual(r) => Layer::Residual(ResidualBlock {
                    f: rfn(&r.f),
                    shortcut: short(&r.shortcut),
                }),
                Layer::Transition(t) => Layer::Transition(Transition {
                    f: rfn(&t.f),
                    g: rfn(&t.g),
                    s1: short(&t.s1),
                    s2: short(&t.s2),
                }),
                Layer::Head(h) => Layer::Head(Head {
                    bn: BnParams {
                        gamma: h.bn.gamma.cast(),
                        beta: h.bn.beta.cast(),
                    },
                    fc: LinearParams {
                        weight: h.fc.weight.cast(),
                        bias: h.fc.bias.cast(),
                    },
                }),
            })
            .collect();
        NetworkPlan {
            layers,
            prefixes: self.prefixes.clone(),
        }
    }

    /// Forward pass. Returns `(n, classes, 1, 1)` logits and the state needed by [`NetworkPlan::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, engine: Engine, ctx: &mut Ctx) -> Result<(Tensor<T>, ForwardState<T>)> {
        let prev = ctx.set_phase(Phase::Forward);
        let r = self.forward_inner(x, engine, ctx);
        ctx.set_phase(prev);
        r
    }

    fn forward_inner(&mut self, x: &Tensor<T>, engine: Engine, ctx: &mut Ctx) -> Result<(Tensor<T>, ForwardState<T>)> {
        let mut saves: Vec<LayerSave<T>> = Vec::with_capacity(self.layers.len());
        let mut cur = ctx.hold(ACT, x.clone());
        for layer in self.layers.iter_mut() {
            let out = match layer {
                Layer::Stem(p) => {
                    ctx.charge(conv2d_madds(cur.shape(), p)?);
                    let out = conv2d(&cur, p)?;
                    let input = ctx.release(cur)?;
                    saves.push(LayerSave::Stem(ctx.hold(CKPT, input)));
                    out
                }
                Layer::Residual(r) => {
                    let (f_out, trace) = r.f.forward(&cur, BnSource::Train, ctx)?;
                    let out = r.shortcut.apply(&cur, ctx)?.add(&f_out)?;
                    saves.push(LayerSave::Residual { input: cur, trace });
                    out
                }
                Layer::Transition(t) => match engine {
                    Engine::Reversible => {
                        let out = t.eval(&cur, ctx)?;
                        let input = ctx.release(cur)?;
                        saves.push(LayerSave::TransitionInput(ctx.hold(CKPT, input)));
                        out
                    }
                    Engine::Stored => {
                        let (out, trace) = t.forward(&cur, ctx)?;
                        ctx.discard(cur)?;
                        saves.push(LayerSave::TransitionTrace(trace));
                        out
                    }
                },
                Layer::Span(blocks) => {
                    let p = split_channels(&cur)?;
                    ctx.discard(cur)?;
                    match engine {
                        Engine::Reversible => {
                            let mut ck = stack_forward(blocks, &p.x1, &p.x2, ctx)?;
                            let idx = saves.len();
                            if let Some(LayerSave::TransitionInput(_)) = saves.last() {
                                if let Some(LayerSave::TransitionInput(h)) = saves.pop() {
                                    ck.nonreversible_saves.push((idx - 1, h));
                                }
                                saves.push(LayerSave::Moved);
                            }
                            let out = merge_halves(&ck.boundary_y1, &ck.boundary_y2)?;
                            saves.push(LayerSave::Checkpoint(ck));
                            out
                        }
                        Engine::Stored => {
                            let tape = stored_forward(blocks, &p.x1, &p.x2, ctx)?;
                            let out = merge_halves(&tape.y1, &tape.y2)?;
                            saves.push(LayerSave::Tape(tape));
                            out
                        }
                    }
                }
                Layer::Head(h) => {
                    ctx.charge(batchnorm_madds(cur.shape(), true));
                    let (bn_out, stats) = batchnorm(&cur, &h.bn, BnMode::Train)?;
                    ctx.observe_relu(&bn_out);
                    let act = relu(&bn_out);
                    ctx.charge(pool_and_head_madds(act.shape(), h.fc.c_out()));
                    let logits = pool_and_head(&act, &h.fc)?;
                    saves.push(LayerSave::Head(HeadTrace {
                        input: cur,
                        bn_out: ctx.hold(ACT, bn_out),
                        act: ctx.hold(ACT, act),
                        stats,
                    }));
                    logits
                }
            };
            cur = ctx.hold(ACT, out);
        }
        let logits = ctx.release(cur)?;
        Ok((logits, ForwardState { saves }))
    }

    /// Logits only; nothing is kept for a backward pass.
    pub fn predict(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let (logits, state) = self.forward(x, Engine::Reversible, ctx)?;
        state.discard(ctx)?;
        Ok(logits)
    }

    /// Parameter gradients in [`NetworkPlan::params`] order.
    pub fn backward(&self, state: ForwardState<T>, dlogits: &Tensor<T>, ctx: &mut Ctx) -> Result<Vec<Tensor<T>>> {
        if state.saves.len() != self.layers.len() {
            return Err(state_mismatch());
        }
        let prev = ctx.set_phase(Phase::Backward);
        let r = self.backward_inner(state, dlogits, ctx);
        ctx.set_phase(prev);
        r
    }

    fn backward_inner(&self, state: ForwardState<T>, dlogits: &Tensor<T>, ctx: &mut Ctx) -> Result<Vec<Tensor<T>>> {
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut pending: HashMap<usize, Held<T>> = HashMap::new();
        let mut d = ctx.hold(GRAD, dlogits.clone());
        for (i, (layer, save)) in self.layers.iter().zip(state.saves).enumerate().rev() {
            let (dx, grads) = match (layer, save) {
                (Layer::Head(h), LayerSave::Head(t)) => {
                    ctx.charge(2 * pool_and_head_madds(t.act.shape(), h.fc.c_out()));
                    let lg = pool_and_head_vjp(&t.act, &h.fc, &d)?;
                    let dbn = relu_vjp(&t.bn_out, &lg.dx)?;
                    ctx.charge(batchnorm_vjp_madds(t.input.shape()));
                    let bg = batchnorm_vjp(&t.input, &h.bn, &t.stats, &dbn)?;
                    ctx.discard(t.input)?;
                    ctx.discard(t.bn_out)?;
                    ctx.discard(t.act)?;
                    ctx.discard(d)?;
                    (bg.dx, vec![bg.dgamma, bg.dbeta, lg.dw, lg.db])
                }
                (Layer::Span(blocks), LayerSave::Checkpoint(ck)) => {
                    let p = split_channels(&d)?;
                    ctx.discard(d)?;
                    let dy1 = ctx.hold(GRAD, p.x1);
                    let dy2 = ctx.hold(GRAD, p.x2);
                    let (g, saves) = stack_backward_held(blocks, ck, dy1, dy2, ctx)?;
                    pending.extend(saves);
                    ctx.discard(g.x1)?;
                    ctx.discard(g.x2)?;
                    let dx = merge_halves(&g.dx1, &g.dx2)?;
                    ctx.discard(g.dx1)?;
                    ctx.discard(g.dx2)?;
                    (dx, g.blocks.iter().flat_map(|b| b.flat().cloned()).collect())
                }
                (Layer::Span(blocks), LayerSave::Tape(tape)) => {
                    let p = split_channels(&d)?;
                    ctx.discard(d)?;
                    let dy1 = ctx.hold(GRAD, p.x1);
                    let dy2 = ctx.hold(GRAD, p.x2);
                    let ((d1, d2, g), _, _) = stored_backward_held(blocks, tape, dy1, dy2, ctx)?;
                    let dx = merge_halves(&d1, &d2)?;
                    ctx.discard(d1)?;
                    ctx.discard(d2)?;
                    (dx, g.iter().flat_map(|b| b.flat().cloned()).collect())
                }
                (Layer::Transition(t), LayerSave::TransitionTrace(tr)) => {
                    let r = t.vjp(tr, &d, ctx)?;
                    ctx.discard(d)?;
                    r
                }
                (Layer::Transition(t), save @ (LayerSave::TransitionInput(_) | LayerSave::Moved)) => {
                    let input = match save {
                        LayerSave::TransitionInput(h) => h,
                        _ => pending.remove(&i).ok_or_else(state_mismatch)?,
                    };
                    let (out, tr) = t.forward(&input, ctx)?;
                    drop(out);
                    ctx.discard(input)?;
                    let r = t.vjp(tr, &d, ctx)?;
                    ctx.discard(d)?;
                    r
                }
                (Layer::Residual(r), LayerSave::Residual { input, trace }) => {
                    let (dxf, gf) = r.f.vjp(trace, &d, ctx)?;
                    let (dxs, gs) = r.shortcut.vjp(&input, &d, ctx)?;
                    ctx.discard(input)?;
                    ctx.discard(d)?;
                    let mut g = gf;
                    g.extend(gs);
                    (dxf.add(&dxs)?, g)
                }
                (Layer::Stem(p), LayerSave::Stem(input)) => {
                    ctx.charge(conv2d_vjp_madds(input.shape(), p)?);
                    let g = conv2d_vjp(&input, p, &d)?;
                    ctx.discard(input)?;
                    ctx.discard(d)?;
                    let mut grads = vec![g.dw];
                    if p.bias.is_some() {
                        grads.push(g.db);
                    }
                    (g.dx, grads)
                }
                _ => return Err(state_mismatch()),
            };
            per_layer[i] = grads;
            d = ctx.hold(GRAD, dx);
        }
        ctx.discard(d)?;
        for (_, h) in pending {
            ctx.discard(h)?;
        }
        Ok(per_layer.into_iter().flatten().collect())
    }

    /// Mean cross-entropy, logits and parameter gradients for one batch.
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        engine: Engine,
        ctx: &mut Ctx,
    ) -> Result<(T, Tensor<T>, Vec<Tensor<T>>)> {
        let (logits, state) = self.forward(x, engine, ctx)?;
        let (loss, dlogits) = match softmax_xent(&logits, labels) {
            Ok(v) => v,
            Err(e) => {
                state.discard(ctx)?;
                return Err(e);
            }
        };
        let grads = self.backward(state, &dlogits, ctx)?;
        Ok((loss, logits, grads))
    }

    /// Shape of the input this plan's stem expects, if it has one.
    pub fn input_channels(&self) -> Option<usize> {
        match self.layers.first() {
            Some(Layer::Stem(p)) => Some(p.c_in()),
            _ => None,
        }
    }
}

/// Shape of a batch of `n` inputs for `spec`.
pub fn input_batch_shape(spec: &ArchSpec, n: usize) -> Shape {
    let (c, h, w) = spec.input_shape;
    Shape::new(n, c, h, w)
}
