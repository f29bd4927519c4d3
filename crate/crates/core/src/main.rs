use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use revnet_core::arch::{ArchSpec, BuildOptions, NetworkPlan};
use revnet_core::experiments::{gradcheck_network, memory_sweep, stack_angle_probe, StackShape, TABLE_PARAMS};
use revnet_core::gradcheck::GradCheckConfig;
use revnet_core::train::{metrics_csv, train, Precision, TrainConfig};

const GRADCHECK_REL: f64 = 1e-5;
const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_FLOOR: f64 = 1e-6;
const MEM_FLAT: f64 = 0.01;
const MEM_STORED: f64 = 0.20;
const ANGLE_EXCESS_DEG: f64 = 1.0;
const ANGLE_TRAIN_DEG: f64 = 5.0;

#[derive(Parser)]
#[command(name = "revnet", version, about = "Reversible residual networks: training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key = value configuration file; built-in toy defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    engine: Option<EngineArg>,
    #[arg(long, global = true)]
    precision: Option<PrecisionArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV reports and checkpoints
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. --set total_steps=100 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv plus checkpoints
    Train,
    /// Compare network gradients against central differences
    Gradcheck,
    /// Sweep span depth and report peak metered activation bytes per engine
    Memprofile,
    /// Count parameters and compare against the reference sizes of known presets
    Paramcount,
    /// Measure gradient angles of f32 reversible backprop against an f64 reference
    Anglecheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Reversible,
    Stored,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut overrides = Vec::new();
    for kv in &cli.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(e) = cli.engine {
        overrides.push((
            "engine".into(),
            matches!(e, EngineArg::Reversible)
                .then_some("reversible")
                .unwrap_or("stored")
                .into(),
        ));
    }
    if let Some(p) = cli.precision {
        overrides.push((
            "precision".into(),
            matches!(p, PrecisionArg::F32).then_some("f32").unwrap_or("f64").into(),
        ));
    }
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let cfg = match &cli.config {
        Some(path) => TrainConfig::from_file(path, &overrides).with_context(|| format!("reading {}", path.display()))?,
        None => TrainConfig::parse("", &overrides)?,
    };
    Ok(cfg)
}

fn write_out(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let p = dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        println!("wrote={}", p.display());
    }
    Ok(())
}

/// Prints one `check` line and returns whether it passed.
fn check(name: &str, value: f64, ok: bool, limit: &str) -> bool {
    println!(
        "check={name} value={value:.6e} limit={limit} status={}",
        if ok { "pass" } else { "fail" }
    );
    ok
}

fn stack_shape(cfg: &TrainConfig) -> StackShape {
    let (_, h, w) = cfg.arch.input_shape;
    StackShape {
        batch: cfg.batch_size.min(16),
        channels: cfg.arch.group_width(0),
        height: h,
        width: w,
    }
}

fn cmd_train(cfg: &TrainConfig, out: Option<&Path>) -> Result<bool> {
    let o = train(cfg, out)?;
    for f in &o.files {
        println!("wrote={}", f.display());
    }
    if out.is_none() {
        print!("{}", metrics_csv(&o.records));
    }
    println!("params={}", o.param_count);
    println!("steps={}", o.records.len());
    if let Some(r) = o.records.last() {
        println!("final_loss={}", r.loss);
    }
    println!("final_train_accuracy={}", o.final_train_accuracy);
    Ok(true)
}

fn cmd_gradcheck(cfg: &TrainConfig) -> Result<bool> {
    let gc = GradCheckConfig {
        step: GRADCHECK_STEP,
        floor: GRADCHECK_FLOOR,
        max_coords: 400,
        seed: cfg.seed,
    };
    let r = gradcheck_network(&cfg.arch, cfg.batch_size.min(8), cfg.seed, gc)?;
    println!("checked={}", r.checked);
    println!("skipped_kinks={}", r.skipped_kinks);
    if let Some(w) = r.worst {
        println!(
            "worst_param={} worst_index={} analytic={:e} numeric={:e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    Ok(check(
        "max_rel_err",
        r.max_rel_err,
        r.checked > 0 && r.max_rel_err < GRADCHECK_REL,
        &format!("<{GRADCHECK_REL:e}"),
    ))
}

fn cmd_memprofile(cfg: &TrainConfig, out: Option<&Path>) -> Result<bool> {
    let sweep = memory_sweep(&[4, 8, 16, 32], stack_shape(cfg), cfg.seed)?;
    print!("{}", sweep.csv());
    write_out(out, "memprofile.csv", &sweep.csv())?;
    println!("block_footprint_bytes={}", sweep.block_footprint);
    let (rev, stored) = sweep.relative_slopes();
    let a = check("reversible_slope_per_block", rev, rev.abs() < MEM_FLAT, &format!("<{MEM_FLAT}"));
    let b = check(
        "stored_slope_per_block",
        stored,
        (stored - 1.0).abs() <= MEM_STORED,
        &format!("1+-{MEM_STORED}"),
    );
    Ok(a && b)
}

fn cmd_paramcount(cfg: &TrainConfig) -> Result<bool> {
    let net = NetworkPlan::<f32>::build(&cfg.arch, BuildOptions::default())?;
    let n = net.count_params();
    println!("params={n}");
    println!("params_millions={:.4}", n as f64 / 1e6);
    let known = TABLE_PARAMS
        .iter()
        .find(|(name, _, _)| ArchSpec::preset(name).is_some_and(|p| p == cfg.arch));
    match known {
        Some((name, target, tol)) => {
            println!("preset={name}");
            let rel = (n as f64 / 1e6 - target) / target;
            Ok(check(
                "relative_deviation",
                rel,
                rel.abs() <= *tol,
                &format!("+-{tol} of {target}M"),
            ))
        }
        None => {
            println!("preset=none");
            Ok(true)
        }
    }
}

fn cmd_anglecheck(cfg: &TrainConfig, out: Option<&Path>) -> Result<bool> {
    let probe = stack_angle_probe(16, stack_shape(cfg), cfg.seed)?;
    println!("init_reversible_f32_deg={:e}", probe.reversible_f32);
    println!("init_stored_f32_deg={:e}", probe.stored_f32);
    let a = check(
        "init_excess_deg",
        probe.excess(),
        probe.excess() < ANGLE_EXCESS_DEG,
        &format!("<{ANGLE_EXCESS_DEG}"),
    );

    let mut run = cfg.clone();
    run.precision = Precision::F32;
    if run.angle_interval.is_none() {
        run.angle_interval = Some(10);
    }
    let o = train(&run, None)?;
    let csv = metrics_csv(&o.records);
    write_out(out, "anglecheck.csv", &csv)?;
    let angles: Vec<f64> = o.records.iter().filter_map(|r| r.angle_deg).collect();
    for r in o.records.iter().filter(|r| r.angle_deg.is_some()) {
        println!("step={} angle_deg={:e}", r.step, r.angle_deg.unwrap_or(f64::NAN));
    }
    let max = angles.iter().copied().fold(0.0, f64::max);
    let b = check(
        "train_max_angle_deg",
        max,
        !angles.is_empty() && max < ANGLE_TRAIN_DEG,
        &format!("<{ANGLE_TRAIN_DEG}"),
    );
    Ok(a && b)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Train => cmd_train(&cfg, out),
        Command::Gradcheck => cmd_gradcheck(&cfg),
        Command::Memprofile => cmd_memprofile(&cfg, out),
        Command::Paramcount => cmd_paramcount(&cfg),
        Command::Anglecheck => cmd_anglecheck(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("revnet: tolerance violated");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("revnet: {e:#}");
            ExitCode::from(2)
        }
    }
}
