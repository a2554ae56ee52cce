use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use skymosaic::imaging::{load_image, save_image};
use skymosaic::pipeline::{run_pipeline, FrameSource};
use skymosaic::synthbench::{
    bench_compare, evaluate_run, generate_sequence, textured_source, GenConfig, GroundTruthSequence,
};
use skymosaic::{FramePose, ImageGray, RunConfig, Telemetry};

/// Side of the generated source when `synth` gets no `--source`.
const GENERATED_SOURCE: usize = 2000;

#[derive(Parser)]
#[command(
    name = "skymosaic",
    version,
    about = "Incremental aerial frame mosaicking"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stitch a directory of frames into a growing map.
    Stitch(StitchArgs),
    /// Generate a synthetic flight with ground truth.
    Synth(SynthArgs),
    /// Score a finished stitch run against ground truth.
    Eval(EvalArgs),
    /// Compare the pipeline with sequential execution.
    Bench(BenchArgs),
}

#[derive(Args)]
struct StitchArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    paced_ms: Option<u64>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    drop_when_full: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Source image; a textured one is generated when omitted.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 0.6)]
    overlap: f64,
    #[arg(long, default_value_t = 5.0)]
    max_rot: f64,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Where bench.json goes; defaults to the directory holding gt.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// What `stitch` leaves behind for `eval`.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RunRecord {
    config: RunConfig,
    poses: Vec<FramePose>,
}

/// Fatal errors map to exit 1; `Ok(false)` means a degenerate success.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOSAIC_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Stitch(a) => stitch(a),
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Bench(a) => bench(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn stitch(a: StitchArgs) -> Result<bool> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(w) = a.workers {
        cfg.pipeline.workers = w;
    }
    if let Some(ms) = a.paced_ms {
        cfg.pipeline.paced_delay_ms = ms;
    }
    if let Some(k) = a.snapshot_every {
        cfg.pipeline.snapshot_every = k;
    }
    if a.drop_when_full {
        cfg.pipeline.drop_when_full = true;
    }
    cfg.output.dir = Some(a.out.clone());
    cfg.validate()?;

    let source =
        FrameSource::from_dir(&a.input).with_context(|| format!("input {}", a.input.display()))?;
    if source.is_empty() {
        bail!("no input frames in {}", a.input.display());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let out = run_pipeline(&source, &cfg)?;
    let t = &out.telemetry;
    println!(
        "{} frames: {} accepted, {} rejected, {:.2} fps, mean latency {:.1} ms, {} snapshots",
        t.per_frame.len(),
        t.accepted,
        t.rejected,
        t.fps,
        t.end_to_end_latency_ms.mean,
        out.snapshots.len()
    );
    write_json(
        &a.out.join("run.json"),
        &RunRecord {
            config: cfg,
            poses: out.poses,
        },
    )?;
    if t.accepted == 0 {
        eprintln!("warning: every frame was rejected");
    }
    Ok(t.accepted > 0)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = GenConfig {
        frames: a.frames,
        overlap: a.overlap,
        max_rot_deg: a.max_rot,
        noise_sigma: a.noise,
        seed: a.seed,
        ..GenConfig::default()
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (source, source_path): (ImageGray, PathBuf) = match &a.source {
        Some(p) => (
            load_image(p)?,
            fs::canonicalize(p).unwrap_or_else(|_| p.clone()),
        ),
        None => {
            let img = textured_source(GENERATED_SOURCE, GENERATED_SOURCE, a.seed);
            // kept out of the frame directory so `stitch` can read it directly
            let rel = Path::new("source").join("source.png");
            fs::create_dir_all(a.out.join("source"))?;
            save_image(&img, a.out.join(&rel))?;
            (img, rel)
        }
    };
    let mut seq = generate_sequence(&source, &cfg)?;
    seq.source_path = Some(source_path);
    let gt = seq.write(&a.out)?;
    println!("{} frames and {}", seq.len(), gt.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let seq = GroundTruthSequence::load(&a.gt)
        .with_context(|| format!("ground truth {}", a.gt.display()))?;
    let run_json = a.run.join("run.json");
    let text = fs::read_to_string(&run_json)
        .with_context(|| format!("missing run artifact {}", run_json.display()))?;
    let record: RunRecord =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", run_json.display()))?;
    if record.poses.len() != seq.len() {
        bail!(
            "frame count mismatch: ground truth has {} frames, run has {}",
            seq.len(),
            record.poses.len()
        );
    }
    let timing: Option<Telemetry> = fs::read_to_string(a.run.join("telemetry.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let source = match &seq.source_path {
        Some(p) if p.exists() => Some(load_image(p)?),
        _ => None,
    };
    let report = evaluate_run(&seq, &record.config, &record.poses, source.as_ref(), timing)?;

    println!("match precision: {:.4}", report.match_precision);
    println!(
        "mean pairwise corner error: {:.4} px",
        report.mean_pairwise_corner_err_px
    );
    println!(
        "max chained corner error: {:.4} px",
        report.max_chain_corner_err_px
    );
    match report.mosaic_mad {
        Some(m) => println!("mosaic MAD: {m:.4}"),
        None => println!("mosaic MAD: n/a (source unavailable)"),
    }
    if let Some(t) = &report.timing {
        println!(
            "timing: {:.2} fps, latency mean {:.1} ms p95 {:.1} ms",
            t.fps, t.end_to_end_latency_ms.mean, t.end_to_end_latency_ms.p95
        );
    }
    write_json(&a.run.join("report.json"), &report)
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(w) = a.workers {
        cfg.pipeline.workers = w;
    }
    cfg.validate()?;
    let seq = GroundTruthSequence::load(&a.gt)
        .with_context(|| format!("ground truth {}", a.gt.display()))?;
    let table = bench_compare(&seq, &cfg)?;
    println!("{table}");
    let dir = match a.out {
        Some(d) => d,
        None => match a.gt.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        },
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("bench.json"), &table)
}
