//! Measurements behind the CLI reports and the acceptance suite: cost ratios,
//! memory sweeps, gradient-angle probes and network gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{input_batch_shape, ArchSpec, BuildOptions, Engine, NetworkPlan};
use crate::coupling::ReversibleBlock;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, NetworkLoss};
use crate::metrics::{flatten, grad_angle, linear_fit_slope, Ctx};
use crate::residual::Init;
use crate::revgrad::{reversible_backprop, stack_backward, stack_forward, stored_backprop, stored_backward, stored_forward};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::synthetic;

/// Shape of one stack experiment: `channels` is the full (unsplit) width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackShape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StackShape {
    pub fn half(&self) -> Shape {
        Shape::new(self.batch, self.channels / 2, self.height, self.width)
    }
}

/// Basic-block additive stack with every conv randomly initialised.
pub fn random_stack<T: Scalar>(depth: usize, channels: usize, seed: u64) -> Result<Vec<ReversibleBlock<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..depth)
        .map(|_| ReversibleBlock::basic(channels, Init { zero_last: false }, &mut rng))
        .collect()
}

/// Four unit-Gaussian tensors of the half shape: x1, x2, dy1, dy2.
pub fn random_io<T: Scalar>(half: Shape, seed: u64) -> [Tensor<T>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| Tensor::randn(half, 1.0, &mut rng))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    pub forward: u64,
    pub stored_total: u64,
    pub reversible_total: u64,
}

impl CostReport {
    pub fn stored_ratio(&self) -> f64 {
        self.stored_total as f64 / self.forward as f64
    }

    pub fn reversible_ratio(&self) -> f64 {
        self.reversible_total as f64 / self.forward as f64
    }
}

/// Counted multiply-adds of both engines on one random f64 stack.
pub fn cost_model(depth: usize, shape: StackShape, seed: u64) -> Result<CostReport> {
    let mut blocks = random_stack::<f64>(depth, shape.channels, seed)?;
    let [x1, x2, dy1, dy2] = random_io::<f64>(shape.half(), seed.wrapping_add(1));
    let mut stored = Ctx::default();
    stored_backprop(&mut blocks, &x1, &x2, &dy1, &dy2, &mut stored)?;
    let mut rev = Ctx::default();
    reversible_backprop(&mut blocks, &x1, &x2, &dy1, &dy2, &mut rev)?;
    debug_assert_eq!(stored.ops.forward_madds, rev.ops.forward_madds);
    Ok(CostReport {
        forward: rev.ops.forward_madds,
        stored_total: stored.ops.total(),
        reversible_total: rev.ops.total(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySweep {
    pub depths: Vec<usize>,
    pub reversible_peaks: Vec<u64>,
    pub stored_peaks: Vec<u64>,
    /// Bytes a stored-activation engine keeps for one block.
    pub block_footprint: u64,
}

impl MemorySweep {
    fn slope(&self, ys: &[u64]) -> f64 {
        let xs: Vec<f64> = self.depths.iter().map(|&d| d as f64).collect();
        let ys: Vec<f64> = ys.iter().map(|&y| y as f64).collect();
        linear_fit_slope(&xs, &ys)
    }

    pub fn reversible_slope(&self) -> f64 {
        self.slope(&self.reversible_peaks)
    }

    pub fn stored_slope(&self) -> f64 {
        self.slope(&self.stored_peaks)
    }

    /// Slopes in units of one block footprint per block.
    pub fn relative_slopes(&self) -> (f64, f64) {
        let f = self.block_footprint as f64;
        (self.reversible_slope() / f, self.stored_slope() / f)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("depth,reversible_peak_bytes,stored_peak_bytes\n");
        for ((d, r), st) in self.depths.iter().zip(&self.reversible_peaks).zip(&self.stored_peaks) {
            s.push_str(&format!("{d},{r},{st}\n"));
        }
        s
    }
}

/// Peak metered activation bytes over forward plus backward through a span,
/// for each depth and both engines.
pub fn memory_sweep(depths: &[usize], shape: StackShape, seed: u64) -> Result<MemorySweep> {
    let mut reversible_peaks = Vec::new();
    let mut stored_peaks = Vec::new();
    let mut block_footprint = 0;
    for &depth in depths {
        let mut blocks = random_stack::<f64>(depth, shape.channels, seed)?;
        block_footprint = blocks[0].trace_bytes(shape.half())? as u64;
        let [x1, x2, dy1, dy2] = random_io::<f64>(shape.half(), seed.wrapping_add(1));

        let mut ctx = Ctx::default();
        ctx.mem.meter_scope("reversible-span");
        let ck = stack_forward(&mut blocks, &x1, &x2, &mut ctx)?;
        stack_backward(&blocks, ck, &dy1, &dy2, &mut ctx)?;
        reversible_peaks.push(ctx.mem.end_scope().expect("open scope").peak_above_entry());

        let mut ctx = Ctx::default();
        ctx.mem.meter_scope("stored-span");
        let tape = stored_forward(&mut blocks, &x1, &x2, &mut ctx)?;
        stored_backward(&blocks, tape, &dy1, &dy2, &mut ctx)?;
        stored_peaks.push(ctx.mem.end_scope().expect("open scope").peak_above_entry());
    }
    Ok(MemorySweep {
        depths: depths.to_vec(),
        reversible_peaks,
        stored_peaks,
        block_footprint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleProbe {
    /// Reversible f32 gradients against stored f64 gradients.
    pub reversible_f32: f64,
    /// Stored f32 gradients against stored f64 gradients.
    pub stored_f32: f64,
}

impl AngleProbe {
    pub fn excess(&self) -> f64 {
        self.reversible_f32 - self.stored_f32
    }
}

/// Angles (degrees) between parameter gradients of one random stack computed three ways.
pub fn stack_angle_probe(depth: usize, shape: StackShape, seed: u64) -> Result<AngleProbe> {
    let mut b64 = random_stack::<f64>(depth, shape.channels, seed)?;
    let mut b32 = random_stack::<f32>(depth, shape.channels, seed)?;
    let io = random_io::<f64>(shape.half(), seed.wrapping_add(1));
    let [x1, x2, dy1, dy2] = &io;
    let [a1, a2, e1, e2] = io.each_ref().map(|t| t.cast::<f32>());

    let reference = stored_backprop(&mut b64, x1, x2, dy1, dy2, &mut Ctx::default())?.weight_grads();
    let rev = reversible_backprop(&mut b32, &a1, &a2, &e1, &e2, &mut Ctx::default())?.weight_grads();
    let st = stored_backprop(&mut b32, &a1, &a2, &e1, &e2, &mut Ctx::default())?.weight_grads();
    let r = flatten(&reference);
    Ok(AngleProbe {
        reversible_f32: grad_angle(&flatten(&rev), &r)?.angle_degrees,
        stored_f32: grad_angle(&flatten(&st), &r)?.angle_degrees,
    })
}

/// Finite-difference check of a randomly initialised f64 network on a seeded synthetic batch.
pub fn gradcheck_network(spec: &ArchSpec, batch: usize, seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut net = NetworkPlan::<f64>::build(
        spec,
        BuildOptions {
            seed,
            zero_init_residual: false,
        },
    )?;
    let data = synthetic(spec.input_shape, spec.classes, batch, 1.0, seed.wrapping_add(1));
    let idx: Vec<usize> = (0..batch).collect();
    let (x, labels) = data.batch::<f64>(&idx);
    debug_assert_eq!(x.shape(), input_batch_shape(spec, batch));
    let (_, _, grads) = net.loss_and_grads(&x, &labels, Engine::Reversible, &mut Ctx::default())?;
    grad_check(
        &mut NetworkLoss {
            net: &mut net,
            x: &x,
            labels: &labels,
        },
        &grads,
        cfg,
    )
}

/// Published parameter counts: (preset, millions, relative tolerance).
pub const TABLE_PARAMS: [(&str, f64, f64); 6] = [
    ("resnet-32", 0.46, 0.02),
    ("revnet-38", 0.46, 0.05),
    ("resnet-110", 1.73, 0.02),
    ("revnet-110", 1.73, 0.05),
    ("resnet-164", 1.70, 0.02),
    ("revnet-164", 1.75, 0.05),
];
