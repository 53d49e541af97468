//! `vfm`: generate phantom cines, reconstruct them, score and plot the
//! results, and run the comparison experiments.
//!
//! Exit status is 0 on success, 1 when a run fails (including any frame
//! that could not be reconstructed), and 2 for usage or configuration
//! errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use vfm_core::autodiff::LAYER_SIZES;
use vfm_core::experiment::{
    self, common_region, evaluate, generate_cine, reconstruct_batch, run_experiment, write_outcomes, CineConfig,
    ExperimentConfig, ExperimentKind, Method, NamedFrame, ReconstructConfig,
};
use vfm_core::grid::extract_boundary;
use vfm_core::io::{self, SolutionFile};
use vfm_core::metrics::summarize;
use vfm_core::pinn::{pretrain_reference, PinnConfig};
use vfm_core::plot::{quiver_svg, PlotOptions};
use vfm_core::{DegradeSpec, VfmError};

#[derive(Parser)]
#[command(name = "vfm", version, about = "Vector flow mapping from color Doppler frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom cine of Doppler frames with ground truth.
    Generate(GenerateArgs),
    /// Remove scanlines from frames.
    Degrade(DegradeArgs),
    /// Reconstruct velocity fields from frames.
    Reconstruct(ReconstructArgs),
    /// Fit one frame and save the network as warm-start weights.
    Pretrain(PretrainArgs),
    /// Score solutions against the frames' reference fields.
    Eval(EvalArgs),
    /// Run a comparison experiment end to end.
    Experiment(ExperimentArgs),
    /// Draw a solution as an SVG quiver plot.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Random seed.
    #[arg(long, env = "VFM_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Lattice size as N_RxN_THETA.
    #[arg(long, default_value = "40x100", value_parser = parse_grid)]
    grid: (usize, usize),
    /// Doppler SNR in dB, or `inf` for noiseless frames.
    #[arg(long, default_value = "inf", value_parser = parse_snr)]
    snr: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
    /// Cells between cavity and sector edge.
    #[arg(long, default_value_t = 2)]
    margin: usize,
    /// Peak stream-function amplitude, m^2/s.
    #[arg(long, default_value_t = 0.01)]
    amplitude: f64,
    /// Periods of the amplitude modulation over the cine.
    #[arg(long, default_value_t = 0.5)]
    cycles: f64,
    /// Relative amplitude of the secondary vortex mode.
    #[arg(long, default_value_t = 0.3)]
    secondary: f64,
}

#[derive(Args)]
struct DegradeArgs {
    /// Input frames: a directory or a glob pattern.
    #[arg(long)]
    frames: String,
    #[arg(long)]
    out: PathBuf,
    /// Keep 1 of every M scanlines, dropping N: `M,N`.
    #[arg(long, value_parser = parse_pair, group = "mode")]
    sparse: Option<(usize, usize)>,
    /// Drop a random block of up to N scanlines per M: `M,N`.
    #[arg(long, value_parser = parse_pair, group = "mode")]
    sparse_random: Option<(usize, usize)>,
    /// Drop this percentage of the outermost scanlines.
    #[arg(long, group = "mode")]
    truncate: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct SolverArgs {
    /// Training iterations for network methods.
    #[arg(long, default_value_t = experiment::DEFAULT_ITERS)]
    iters: usize,
    /// Warm-start weight file for network methods.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Smoothing weight of the constrained least-squares solver.
    #[arg(long, default_value_t = vfm_core::ivfm::DEFAULT_LAMBDA_S)]
    lambda_s: f64,
    #[command(flatten)]
    seed: SeedArg,
    /// Frames solved concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    frames: String,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct PretrainArgs {
    /// Frame file to fit.
    #[arg(long)]
    frame: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = experiment::DEFAULT_ITERS)]
    iters: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Solution directory written by `reconstruct`.
    #[arg(long)]
    solutions: PathBuf,
    /// Frames carrying the reference fields.
    #[arg(long)]
    frames: String,
    /// Restrict scoring to cells valid in every frame set given here
    /// (repeatable); frames are matched by id.
    #[arg(long)]
    common_region: Vec<String>,
    /// Per-frame metrics CSV.
    #[arg(long)]
    csv: PathBuf,
    /// Aggregated JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: ExperimentKind,
    /// Comma-separated subset of ivfm, rb-pinn, al-pinn.
    #[arg(long, default_value = "ivfm,rb-pinn,al-pinn")]
    methods: String,
    #[arg(long)]
    frames: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Iterations of the warm-start fit (ablation); defaults to --iters.
    #[arg(long)]
    pretrain_iters: Option<usize>,
    /// Truncation percentages (truncation experiment).
    #[arg(long, value_delimiter = ',', default_values_t = experiment::DEFAULT_TRUNCATIONS)]
    truncations: Vec<f64>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    solution: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Draw one arrow every N cells.
    #[arg(long, default_value_t = PlotOptions::default().decimation)]
    decimation: usize,
    #[arg(long, default_value_t = PlotOptions::default().width)]
    width: f64,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or("expected N_RxN_THETA")?;
    Ok((a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?))
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected M,N")?;
    Ok((a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?))
}

fn parse_snr(s: &str) -> Result<f64, String> {
    match s {
        "inf" | "Inf" | "INF" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|e| format!("{e}")),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: VfmError| e.to_string())
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: VfmError| e.to_string())
}

/// Files named by a directory (its `*.json`) or a glob pattern, sorted.
fn resolve(pattern: &str) -> anyhow::Result<Vec<PathBuf>> {
    let path = Path::new(pattern);
    let mut files = if path.is_dir() {
        io::json_files(path)?
    } else {
        glob::glob(pattern)
            .map_err(|e| config(format!("bad pattern '{pattern}': {e}")))?
            .collect::<Result<Vec<_>, _>>()?
    };
    files.retain(|p| !p.to_string_lossy().ends_with(".diag.json"));
    files.sort();
    if files.is_empty() {
        bail!("no frame files match '{pattern}'");
    }
    Ok(files)
}

fn load_frames(pattern: &str) -> anyhow::Result<Vec<NamedFrame>> {
    resolve(pattern)?
        .iter()
        .map(|p| {
            let f = io::read_frame(p).with_context(|| format!("reading {}", p.display()))?;
            Ok((io::frame_id(p)?, f))
        })
        .collect()
}

fn write_frames(dir: &Path, frames: &[NamedFrame]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (id, f) in frames {
        io::write_frame(&dir.join(format!("{id}.json")), f)?;
    }
    Ok(())
}

fn config(msg: impl Into<String>) -> anyhow::Error {
    VfmError::Config(msg.into()).into()
}

fn solver_config(method: Method, a: &SolverArgs) -> ReconstructConfig {
    ReconstructConfig {
        iters: a.iters,
        pretrained: a.pretrained.clone(),
        lambda_s: a.lambda_s,
        seed: a.seed.seed,
        jobs: a.jobs,
        ..ReconstructConfig::new(method)
    }
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let cfg = CineConfig {
        frames: a.frames,
        n_r: a.grid.0,
        n_theta: a.grid.1,
        margin: a.margin,
        amplitude: a.amplitude,
        cycles: a.cycles,
        secondary: a.secondary,
        snr_db: a.snr,
        seed: a.seed.seed,
    };
    let frames = generate_cine(&cfg)?;
    write_frames(&a.out, &frames)?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn degrade(a: DegradeArgs) -> anyhow::Result<()> {
    let spec = match (a.sparse, a.sparse_random, a.truncate) {
        (Some((m, n)), None, None) => DegradeSpec::SparseDeterministic { m, n },
        (None, Some((m, n)), None) => DegradeSpec::SparseRandom {
            m,
            n,
            seed: a.seed.seed,
        },
        (None, None, Some(pct)) => DegradeSpec::Truncate { pct },
        _ => return Err(config("choose one of --sparse, --sparse-random, --truncate")),
    };
    spec.validate().map_err(|e| config(e.to_string()))?;
    let frames = experiment::degrade_all(&load_frames(&a.frames)?, &spec)?;
    write_frames(&a.out, &frames)?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    let cfg = solver_config(a.method, &a.solver);
    let frames = load_frames(&a.frames)?;
    let outcomes = reconstruct_batch(&frames, &cfg)?;
    write_outcomes(&a.out, &outcomes)?;
    let times: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.solution.is_some())
        .map(|o| o.diagnostics.wall_clock_s)
        .collect();
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.solution.is_none())
        .map(|o| o.frame_id())
        .collect();
    let flagged: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.solution.is_some() && o.diagnostics.flagged)
        .map(|o| o.frame_id())
        .collect();
    let summary = serde_json::json!({
        "method": a.method.name(),
        "frames": outcomes.len(),
        "failed": failed,
        "flagged": flagged,
        "median_seconds": vfm_core::metrics::median(&times).ok(),
        "config": cfg,
    });
    io::write_json_pretty(&a.out.join("summary.json"), &summary)?;
    if let Ok(m) = vfm_core::metrics::median(&times) {
        println!("{}: {} frames, median {:.3} s per frame", a.method, times.len(), m);
    }
    for o in outcomes.iter().filter(|o| o.solution.is_none()) {
        eprintln!(
            "frame {} failed: {}",
            o.frame_id(),
            o.diagnostics.error.as_deref().unwrap_or("unknown error")
        );
    }
    if !flagged.is_empty() {
        eprintln!("frames solved by the fallback path: {}", flagged.join(", "));
    }
    if !failed.is_empty() {
        bail!("{} of {} frames failed", failed.len(), outcomes.len());
    }
    Ok(())
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let frame = io::read_frame(&a.frame)?.to_frame()?;
    let bc = extract_boundary(frame.seg(), frame.grid(), None)?;
    let cfg = PinnConfig {
        seed: a.seed.seed,
        ..PinnConfig::with_iters(a.iters)
    };
    let sol = pretrain_reference(&frame, &bc, &cfg, &a.out)?;
    println!(
        "saved {} parameters ({:?}) to {}; final objective {:.4e}",
        sol.params.param_count(),
        LAYER_SIZES,
        a.out.display(),
        sol.diagnostics.final_objective
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let solutions: Vec<SolutionFile> = io::json_files(&a.solutions)?
        .into_iter()
        .filter(|p| !p.to_string_lossy().ends_with(".diag.json"))
        .filter(|p| p.file_name().is_some_and(|n| n != "summary.json"))
        .map(|p| io::read_json(&p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<_>>()?;
    if solutions.is_empty() {
        bail!("no solutions in {}", a.solutions.display());
    }
    let references = load_frames(&a.frames)?;
    let region = if a.common_region.is_empty() {
        None
    } else {
        let sets: Vec<BTreeMap<String, vfm_core::io::FrameFile>> = a
            .common_region
            .iter()
            .map(|p| Ok(load_frames(p)?.into_iter().collect()))
            .collect::<anyhow::Result<_>>()?;
        let mut regions = BTreeMap::new();
        for s in &solutions {
            let files = sets
                .iter()
                .map(|set| {
                    set.get(&s.frame_id)
                        .ok_or_else(|| anyhow!("frame {} missing from a --common-region set", s.frame_id))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            regions.insert(s.frame_id.clone(), common_region(&files)?);
        }
        Some(regions)
    };
    let rows = evaluate(&solutions, &references, region.as_ref())?;
    io::write_metrics_csv(&a.csv, &rows)?;
    let mut by_method: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for r in &rows {
        by_method.entry(r.method.clone()).or_default().push(r.clone());
    }
    let reports = by_method
        .into_iter()
        .map(|(m, rows)| summarize(&m, rows))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &reports {
        println!(
            "{}: r2_vr {:.3} ± {:.3}, r2_vtheta {:.3} ± {:.3}, nRMSE {:.2} ± {:.2} % ({} frames)",
            r.method,
            r.r2_vr.median,
            r.r2_vr.robust_std,
            r.r2_vtheta.median,
            r.r2_vtheta.robust_std,
            r.nrmse.median,
            r.nrmse.robust_std,
            r.per_frame.len()
        );
    }
    if let Some(path) = &a.report {
        io::write_json_pretty(path, &reports)?;
    }
    Ok(())
}

fn run_experiment_cmd(a: ExperimentArgs) -> anyhow::Result<()> {
    let methods = a
        .methods
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = ExperimentConfig {
        iters: a.solver.iters,
        pretrain_iters: a.pretrain_iters,
        lambda_s: a.solver.lambda_s,
        seed: a.solver.seed.seed,
        jobs: a.solver.jobs,
        truncations: a.truncations,
        ..ExperimentConfig::new(a.kind, methods)
    };
    cfg.validate()?;
    if a.solver.pretrained.is_some() {
        return Err(config("experiments manage warm starts themselves; drop --pretrained"));
    }
    let frames = load_frames(&a.frames)?;
    let report = run_experiment(&cfg, &frames, &a.out)?;
    for r in &report.rows {
        let nrmse = r.nrmse.map(|s| format!("{:.2} ± {:.2} %", s.median, s.robust_std)).unwrap_or_default();
        let r2 = r.r2_vr.map(|s| format!("{:.3}", s.median)).unwrap_or_default();
        println!("{:<8} {:<28} r2_vr {r2:<6} nRMSE {nrmse}", r.method, r.condition);
    }
    if let Some(nested) = report.nested_regions {
        println!("valid regions strictly nested: {nested}");
    }
    for e in &report.errors {
        eprintln!("{e}");
    }
    if !report.errors.is_empty() {
        bail!("{} reconstructions failed", report.errors.len());
    }
    Ok(())
}

fn plot(a: PlotArgs) -> anyhow::Result<()> {
    let sol: SolutionFile = io::read_json(&a.solution)?;
    let svg = quiver_svg(
        &sol.grid()?,
        &sol.field()?,
        &PlotOptions {
            decimation: a.decimation,
            width: a.width,
        },
    )?;
    std::fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<VfmError>() {
        Some(VfmError::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Degrade(a) => degrade(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => run_experiment_cmd(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
