//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. All tolerances are pinned below.

use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use revnet_core::arch::{ArchSpec, BuildOptions, Engine, Family, NetworkPlan};
use revnet_core::coupling::{affine_forward, affine_reverse, nice_forward, nice_reverse};
use revnet_core::experiments::{cost_model, gradcheck_network, memory_sweep, random_io, random_stack, stack_angle_probe, StackShape};
use revnet_core::gradcheck::{grad_check, relative_error, FnTarget, GradCheckConfig, GradCheckReport};
use revnet_core::kernels::*;
use revnet_core::revgrad::stored_backprop;
use revnet_core::train::{train, Checkpoint, Precision, TrainConfig};
use revnet_core::{stack_backward, stack_forward, Ctx, Init, ResidualFn, Result, Shape, StackGrads, Tensor};

// 1. reconstruction
const RECON_STACKS: usize = 100;
const RECON_MAX_DEPTH: usize = 32;
const RECON_ABS_F64: f64 = 1e-10;
const RECON_REL_F32: f64 = 1e-4;
// 2. oracle equivalence
const ORACLE_DEPTHS: [usize; 5] = [1, 2, 4, 8, 16];
const ORACLE_REL: f64 = 1e-9;
/// Coordinates smaller than this fraction of their tensor's largest entry are
/// compared against that fraction instead of their own magnitude.
const ORACLE_FLOOR_FRACTION: f64 = 1e-4;
// 3. finite differences
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;
const FD_REL: f64 = 1e-5;
// 4. parameter counts: (preset, millions, relative tolerance)
const PARAM_TABLE: [(&str, f64, f64); 6] = [
    ("resnet-32", 0.46, 0.02),
    ("revnet-38", 0.46, 0.05),
    ("resnet-110", 1.73, 0.02),
    ("revnet-110", 1.73, 0.05),
    ("resnet-164", 1.70, 0.02),
    ("revnet-164", 1.75, 0.05),
];
// 5. cost model
const COST_DEPTH: usize = 8;
const STORED_RATIO: (f64, f64) = (2.6, 3.4);
const REVERSIBLE_RATIO: (f64, f64) = (3.5, 4.6);
// 6. memory
const MEM_DEPTHS: [usize; 4] = [4, 8, 16, 32];
const MEM_FLAT: f64 = 0.01;
const MEM_STORED_TOL: f64 = 0.20;
// 7. numerical error
const ANGLE_DEPTH: usize = 16;
const ANGLE_EXCESS_DEG: f64 = 1.0;
const ANGLE_TRAIN_DEG: f64 = 5.0;
const ANGLE_INTERVAL: u64 = 10;
// 8. training
const TRAIN_STEPS: u64 = 500;
const TRAIN_ACCURACY: f64 = 0.95;
const ENGINE_STEPS: u64 = 50;
const ENGINE_REL: f64 = 1e-8;
// 9. coupling variants
const VARIANT_INSTANCES: usize = 100;
const VARIANT_ABS: f64 = 1e-10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(checks: &[(bool, String)]) -> Outcome {
    Outcome {
        pass: checks.iter().all(|(ok, _)| *ok),
        detail: checks.iter().map(|(_, d)| d.as_str()).collect::<Vec<_>>().join("; "),
    }
}

fn small_shape() -> StackShape {
    StackShape {
        batch: 4,
        channels: 8,
        height: 6,
        width: 6,
    }
}

fn toy_config() -> TrainConfig {
    TrainConfig::default()
}

fn rel_to_max(approx: &Tensor<f64>, exact: &Tensor<f64>) -> f64 {
    approx.max_abs_diff(exact).expect("same shape") / exact.max_abs().max(f64::MIN_POSITIVE)
}

fn c1_reconstruction() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_f64: f64 = 0.0;
    for i in 0..RECON_STACKS {
        let depth = rng.gen_range(1..=RECON_MAX_DEPTH);
        let shape = StackShape {
            batch: rng.gen_range(1..=4),
            channels: 2 * rng.gen_range(1..=4),
            height: rng.gen_range(2..=6),
            width: rng.gen_range(2..=6),
        };
        let mut blocks = random_stack::<f64>(depth, shape.channels, 1000 + i as u64)?;
        let [x1, x2, _, _] = random_io::<f64>(shape.half(), 2000 + i as u64);
        let mut ctx = Ctx::default();
        let (mut a, mut b) = (x1.clone(), x2.clone());
        for blk in blocks.iter_mut() {
            (a, b) = blk.forward(&a, &b, &mut ctx)?;
        }
        for blk in blocks.iter().rev() {
            (a, b) = blk.reverse(&a, &b, &mut ctx)?;
        }
        worst_f64 = worst_f64.max(a.max_abs_diff(&x1)?).max(b.max_abs_diff(&x2)?);
    }

    let shape = small_shape();
    let mut blocks = random_stack::<f32>(RECON_MAX_DEPTH, shape.channels, 7)?;
    let [x1, x2, _, _] = random_io::<f64>(shape.half(), 8);
    let (x1f, x2f) = (x1.cast::<f32>(), x2.cast::<f32>());
    let mut ctx = Ctx::default();
    let (mut a, mut b) = (x1f.clone(), x2f.clone());
    for blk in blocks.iter_mut() {
        (a, b) = blk.forward(&a, &b, &mut ctx)?;
    }
    for blk in blocks.iter().rev() {
        (a, b) = blk.reverse(&a, &b, &mut ctx)?;
    }
    let rel_f32 = rel_to_max(&a.cast(), &x1f.cast()).max(rel_to_max(&b.cast(), &x2f.cast()));
    Ok(outcome(&[
        (
            worst_f64 < RECON_ABS_F64,
            format!("f64 max abs err {worst_f64:.2e} < {RECON_ABS_F64:e} over {RECON_STACKS} stacks"),
        ),
        (
            rel_f32 < RECON_REL_F32,
            format!("f32 depth-{RECON_MAX_DEPTH} rel err {rel_f32:.2e} < {RECON_REL_F32:e}"),
        ),
    ]))
}

fn coordinate_rel(got: &Tensor<f64>, want: &Tensor<f64>) -> f64 {
    let floor = ORACLE_FLOOR_FRACTION * want.max_abs();
    got.data()
        .iter()
        .zip(want.data())
        .map(|(&a, &b)| relative_error(a, b, floor.max(f64::MIN_POSITIVE)))
        .fold(0.0, f64::max)
}

fn grads_rel(got: &StackGrads<f64>, want: &StackGrads<f64>) -> f64 {
    let mut worst = coordinate_rel(&got.dx1, &want.dx1).max(coordinate_rel(&got.dx2, &want.dx2));
    for (a, b) in got.weight_grads().iter().zip(want.weight_grads().iter()) {
        worst = worst.max(coordinate_rel(a, b));
    }
    worst
}

fn c2_oracle() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (k, &depth) in ORACLE_DEPTHS.iter().enumerate() {
        for rep in 0..3u64 {
            let seed = 10 * k as u64 + rep;
            let shape = small_shape();
            let mut blocks = random_stack::<f64>(depth, shape.channels, seed)?;
            let [x1, x2, dy1, dy2] = random_io::<f64>(shape.half(), seed + 500);
            let want = stored_backprop(&mut blocks, &x1, &x2, &dy1, &dy2, &mut Ctx::default())?;
            let mut ctx = Ctx::default();
            let ck = stack_forward(&mut blocks, &x1, &x2, &mut ctx)?;
            let got = stack_backward(&blocks, ck, &dy1, &dy2, &mut ctx)?;
            coords += 2 * x1.len() + got.weight_grads().iter().map(Tensor::len).sum::<usize>();
            worst = worst.max(grads_rel(&got, &want));
        }
    }
    Ok(outcome(&[(
        worst < ORACLE_REL,
        format!("max coordinate rel err {worst:.2e} < {ORACLE_REL:e} over {coords} coordinates"),
    )]))
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v + 0.25 * v.signum())
}

fn randn(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn fd<F>(params: Vec<Tensor<f64>>, analytic: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], &mut Ctx) -> Result<f64>,
{
    let cfg = GradCheckConfig {
        step: FD_STEP,
        floor: FD_FLOOR,
        max_coords: 100_000,
        seed: 0,
    };
    grad_check(&mut FnTarget { params, f }, analytic, cfg)
}

fn kernel_reports() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut out = Vec::new();

    let x = randn(Shape::new(2, 3, 5, 5), &mut rng);
    let w = randn(Shape::new(4, 3, 3, 3), &mut rng);
    let bias = randn(Shape::vector(4), &mut rng);
    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        let p = ConvParams::new(w.clone(), Some(bias.clone()), stride, padding)?;
        let r = randn(conv2d(&x, &p)?.shape(), &mut rng);
        let g = conv2d_vjp(&x, &p, &r)?;
        let rep = fd(vec![x.clone(), w.clone(), bias.clone()], &[g.dx, g.dw, g.db], |t, _| {
            conv2d(&t[0], &ConvParams::new(t[1].clone(), Some(t[2].clone()), stride, padding)?)?.dot(&r)
        })?;
        out.push(("conv2d", rep));
    }

    let x = randn(Shape::new(3, 4, 3, 3), &mut rng);
    let bn = BnParams {
        gamma: randn(Shape::vector(4), &mut rng),
        beta: randn(Shape::vector(4), &mut rng),
    };
    let r = randn(x.shape(), &mut rng);
    let (_, stats) = batchnorm(&x, &bn, BnMode::Train)?;
    let g = batchnorm_vjp(&x, &bn, &stats, &r)?;
    out.push((
        "batchnorm",
        fd(vec![x, bn.gamma.clone(), bn.beta.clone()], &[g.dx, g.dgamma, g.dbeta], |t, _| {
            let p = BnParams {
                gamma: t[1].clone(),
                beta: t[2].clone(),
            };
            batchnorm(&t[0], &p, BnMode::Train)?.0.dot(&r)
        })?,
    ));

    let x = away_from_zero(randn(Shape::new(2, 3, 4, 4), &mut rng));
    let r = randn(x.shape(), &mut rng);
    let g = relu_vjp(&x, &r)?;
    out.push(("relu", fd(vec![x], &[g], |t, _| relu(&t[0]).dot(&r))?));

    let x = randn(Shape::new(3, 5, 1, 1), &mut rng);
    let lp = LinearParams::new(randn(Shape::new(4, 5, 1, 1), &mut rng), randn(Shape::vector(4), &mut rng))?;
    let r = randn(Shape::new(3, 4, 1, 1), &mut rng);
    let g = linear_vjp(&x, &lp, &r)?;
    out.push((
        "linear",
        fd(vec![x, lp.weight.clone(), lp.bias.clone()], &[g.dx, g.dw, g.db], |t, _| {
            linear(&t[0], &LinearParams::new(t[1].clone(), t[2].clone())?)?.dot(&r)
        })?,
    ));

    let x = randn(Shape::new(2, 5, 3, 3), &mut rng);
    let r = randn(Shape::new(2, 4, 1, 1), &mut rng);
    let g = pool_and_head_vjp(&x, &lp, &r)?;
    out.push((
        "pool_and_head",
        fd(vec![x, lp.weight.clone(), lp.bias.clone()], &[g.dx, g.dw, g.db], |t, _| {
            pool_and_head(&t[0], &LinearParams::new(t[1].clone(), t[2].clone())?)?.dot(&r)
        })?,
    ));

    let x = randn(Shape::new(2, 3, 4, 4), &mut rng);
    let r = randn(Shape::new(2, 3, 1, 1), &mut rng);
    let g = global_avg_pool_vjp(x.shape(), &r)?;
    out.push(("global_avg_pool", fd(vec![x.clone()], &[g], |t, _| global_avg_pool(&t[0]).dot(&r))?));

    let r = randn(Shape::new(2, 3, 2, 2), &mut rng);
    let g = avg_pool2_vjp(x.shape(), &r)?;
    out.push(("avg_pool2", fd(vec![x.clone()], &[g], |t, _| avg_pool2(&t[0])?.dot(&r))?));

    let r = randn(Shape::new(2, 5, 4, 4), &mut rng);
    let g = pad_channels_vjp(&r, 3)?;
    out.push(("pad_channels", fd(vec![x], &[g], |t, _| pad_channels(&t[0], 5)?.dot(&r))?));

    let logits = randn(Shape::new(4, 3, 1, 1), &mut rng);
    let labels = [0, 2, 1, 2];
    let (_, g) = softmax_xent(&logits, &labels)?;
    out.push(("softmax_xent", fd(vec![logits], &[g], |t, _| Ok(softmax_xent(&t[0], &labels)?.0))?));
    Ok(out)
}

fn c3_finite_differences() -> Result<Outcome> {
    let mut checks = Vec::new();
    let mut kernel_worst: f64 = 0.0;
    let mut kernel_coords = 0;
    for (name, rep) in kernel_reports()? {
        if rep.checked == 0 || rep.max_rel_err >= FD_REL {
            checks.push((
                false,
                format!("{name} vjp rel err {:.2e} over {} coords", rep.max_rel_err, rep.checked),
            ));
        }
        kernel_worst = kernel_worst.max(rep.max_rel_err);
        kernel_coords += rep.checked;
    }
    checks.push((
        kernel_worst < FD_REL,
        format!("kernel vjps max rel err {kernel_worst:.2e} over {kernel_coords} coords"),
    ));

    let toy = toy_config().arch;
    let bottleneck = ArchSpec {
        family: Family::Revnet,
        bottleneck: true,
        units: vec![1, 1],
        channels: vec![8, 4, 8],
        classes: 3,
        input_shape: (3, 6, 6),
    };
    for (name, spec, coords) in [("toy revnet", toy, 2000), ("bottleneck revnet", bottleneck, 600)] {
        let cfg = GradCheckConfig {
            step: FD_STEP,
            floor: FD_FLOOR,
            max_coords: coords,
            seed: 5,
        };
        let rep = gradcheck_network(&spec, 8, 11, cfg)?;
        checks.push((
            rep.checked > 0 && rep.max_rel_err < FD_REL,
            format!(
                "{name} max rel err {:.2e} over {} coords ({} kinks skipped)",
                rep.max_rel_err, rep.checked, rep.skipped_kinks
            ),
        ));
    }
    Ok(outcome(&checks))
}

fn c4_param_counts() -> Result<Outcome> {
    let mut checks = Vec::new();
    for (name, millions, tol) in PARAM_TABLE {
        let spec = ArchSpec::preset(name).expect("known preset");
        let n = NetworkPlan::<f32>::build(&spec, BuildOptions::default())?.count_params();
        let rel = (n as f64 / 1e6 - millions) / millions;
        checks.push((
            rel.abs() <= tol,
            format!("{name} {n} ({:+.2}% vs {millions}M, tol {}%)", 100.0 * rel, 100.0 * tol),
        ));
    }
    Ok(outcome(&checks))
}

fn c5_cost() -> Result<Outcome> {
    let r = cost_model(COST_DEPTH, small_shape(), 55)?;
    let (s, v) = (r.stored_ratio(), r.reversible_ratio());
    Ok(outcome(&[
        (
            (STORED_RATIO.0..=STORED_RATIO.1).contains(&s),
            format!("stored/forward {s:.3} in {STORED_RATIO:?}"),
        ),
        (
            (REVERSIBLE_RATIO.0..=REVERSIBLE_RATIO.1).contains(&v),
            format!("reversible/forward {v:.3} in {REVERSIBLE_RATIO:?}"),
        ),
    ]))
}

fn c6_memory() -> Result<Outcome> {
    let sweep = memory_sweep(
        &MEM_DEPTHS,
        StackShape {
            batch: 8,
            channels: 16,
            height: 8,
            width: 8,
        },
        66,
    )?;
    let (rev, stored) = sweep.relative_slopes();
    Ok(outcome(&[
        (
            rev.abs() < MEM_FLAT,
            format!("reversible slope {rev:.4} footprints/block (peaks {:?})", sweep.reversible_peaks),
        ),
        (
            (stored - 1.0).abs() <= MEM_STORED_TOL,
            format!("stored slope {stored:.4} footprints/block"),
        ),
    ]))
}

fn c7_angles() -> Result<Outcome> {
    let probe = stack_angle_probe(
        ANGLE_DEPTH,
        StackShape {
            batch: 8,
            channels: 16,
            height: 8,
            width: 8,
        },
        77,
    )?;
    let mut cfg = toy_config();
    cfg.precision = Precision::F32;
    cfg.total_steps = TRAIN_STEPS;
    cfg.angle_interval = Some(ANGLE_INTERVAL);
    let run = train(&cfg, None)?;
    let angles: Vec<f64> = run.records.iter().filter_map(|r| r.angle_deg).collect();
    let max = angles.iter().copied().fold(0.0, f64::max);
    let expected = TRAIN_STEPS.div_ceil(ANGLE_INTERVAL) as usize;
    Ok(outcome(&[
        (
            probe.excess() < ANGLE_EXCESS_DEG,
            format!(
                "init excess {:.2e} deg (reversible {:.2e}, stored {:.2e})",
                probe.excess(),
                probe.reversible_f32,
                probe.stored_f32
            ),
        ),
        (
            angles.len() == expected && max < ANGLE_TRAIN_DEG,
            format!("training max angle {max:.2e} deg over {} probes", angles.len()),
        ),
    ]))
}

fn c8_training() -> Result<Outcome> {
    let mut cfg = toy_config();
    cfg.total_steps = TRAIN_STEPS;
    let run = train(&cfg, None)?;
    let acc = run.final_train_accuracy;

    let dir = TempDir::new()?;
    let mut runs = Vec::new();
    for engine in [Engine::Stored, Engine::Reversible] {
        let mut c = toy_config();
        c.total_steps = ENGINE_STEPS;
        c.engine = engine;
        let out = dir.path().join(format!("{engine:?}"));
        let o = train(&c, Some(&out))?;
        let ck = Checkpoint::<f64>::load(&out.join("checkpoint-final.bin"))?;
        runs.push((o.records, ck));
    }
    let (stored, rev) = (&runs[0], &runs[1]);
    let loss_rel = stored
        .0
        .iter()
        .zip(&rev.0)
        .map(|(a, b)| relative_error(b.loss, a.loss, 0.0))
        .fold(0.0, f64::max);
    let param_rel = stored
        .1
        .params
        .iter()
        .zip(&rev.1.params)
        .map(|((_, a), (_, b))| rel_to_max(b, a))
        .fold(0.0, f64::max);
    Ok(outcome(&[
        (acc > TRAIN_ACCURACY, format!("training accuracy {acc:.4} > {TRAIN_ACCURACY}")),
        (
            stored.0.len() == ENGINE_STEPS as usize && loss_rel < ENGINE_REL,
            format!("engine loss curves rel {loss_rel:.2e} over {ENGINE_STEPS} steps"),
        ),
        (param_rel < ENGINE_REL, format!("final parameters rel {param_rel:.2e}")),
    ]))
}

fn c9_variants() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut nice, mut affine): (f64, f64) = (0.0, 0.0);
    let init = Init { zero_last: false };
    for _ in 0..VARIANT_INSTANCES {
        let c = rng.gen_range(1..=4);
        let shape = Shape::new(rng.gen_range(1..=4), c, rng.gen_range(2..=5), rng.gen_range(2..=5));
        let f = ResidualFn::<f64>::basic(c, c, 1, init, &mut rng);
        let g = ResidualFn::<f64>::basic(c, c, 1, init, &mut rng);
        let x1 = randn(shape, &mut rng);
        let x2 = randn(shape, &mut rng);
        let mut ctx = Ctx::default();

        let (y1, y2) = nice_forward(&f, &x1, &x2, &mut ctx)?;
        let (a, b) = nice_reverse(&f, &y1, &y2, &mut ctx)?;
        nice = nice.max(a.max_abs_diff(&x1)?).max(b.max_abs_diff(&x2)?);

        let (y1, y2) = affine_forward(&f, &g, &x1, &x2, &mut ctx)?;
        let (a, b) = affine_reverse(&f, &g, &y1, &y2, &mut ctx)?;
        affine = affine.max(a.max_abs_diff(&x1)?).max(b.max_abs_diff(&x2)?);
    }
    Ok(outcome(&[
        (nice < VARIANT_ABS, format!("NICE max abs err {nice:.2e}")),
        (affine < VARIANT_ABS, format!("affine max abs err {affine:.2e}")),
    ]))
}

type Criterion = (u32, &'static str, fn() -> Result<Outcome>, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "reconstruction exactness", c1_reconstruction, Duration::from_secs(60)),
        (
            2,
            "reconstruction backprop matches stored oracle",
            c2_oracle,
            Duration::from_secs(120),
        ),
        (3, "finite-difference gradients", c3_finite_differences, Duration::from_secs(300)),
        (4, "parameter counts", c4_param_counts, Duration::from_secs(10)),
        (5, "multiply-add cost ratios", c5_cost, Duration::from_secs(60)),
        (6, "activation memory independent of depth", c6_memory, Duration::from_secs(120)),
        (7, "gradient angle under f32", c7_angles, Duration::from_secs(300)),
        (8, "training sanity and engine equivalence", c8_training, Duration::from_secs(300)),
        (9, "NICE and affine invertibility", c9_variants, Duration::from_secs(30)),
    ];
    let results: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(_, _, f, _)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let r = f();
                    (r, t.elapsed())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });

    let mut all = true;
    for ((n, name, _, budget), (r, took)) in criteria.iter().zip(results) {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = took <= *budget;
        let pass = pass && in_time;
        all &= pass;
        println!(
            "criterion {n}: {} {name}: {detail}; {:.1}s (budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
