use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nearfar::dataset::export_sequence;
use nearfar::metrics::Region;
use nearfar::pipeline::{
    compare_run_dirs, comparison_file_name, eval, format_gradcheck, gradcheck, metrics_file_name, pretrain, replay,
    Mode, PretrainConfig, RunConfig,
};
use nearfar::synth::{make_pretrain_sequence, make_shift_sequence, SceneSpec, BENCHMARK_FRAMES};
use nearfar::Error;

#[derive(Parser)]
#[command(
    name = "nearfar",
    version,
    about = "Self-supervised near-to-far obstacle segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic RGB-D sequence to disk.
    SynthGen(SynthGenArgs),
    /// Train the full network offline on geometric labels.
    Pretrain(PretrainArgs),
    /// Replay a sequence through the online (or frozen) segmentation loop.
    Replay(ReplayArgs),
    /// Score predictions against ground truth, or compare two runs.
    Eval(EvalArgs),
    /// Finite-difference check of the network gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Benchmark {
    Shift,
    Pretrain,
}

#[derive(Args)]
struct SynthGenArgs {
    /// Built-in scene to render.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    benchmark: Option<Benchmark>,
    /// Scene description in TOML.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Frame count for the pretraining benchmark.
    #[arg(long, default_value_t = BENCHMARK_FRAMES)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Training sequence directories.
    #[arg(long = "train", required = true, num_args = 1..)]
    train: Vec<PathBuf>,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene seeds reserved for evaluation; overlapping training seeds are refused.
    #[arg(long = "test-seed", num_args = 1.., default_values_t = [7])]
    test_seeds: Vec<u64>,
    /// Output parameter file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Online,
    Frozen,
}

#[derive(Args)]
struct ReplayArgs {
    /// Run configuration in TOML; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sequence: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Run the learner and prediction only on every k-th frame.
    #[arg(long)]
    infer_every_k: Option<usize>,
    #[arg(long)]
    steps_per_frame: Option<usize>,
    /// Seed of the replay-window sampler.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    All,
    FarField,
    Both,
}

impl RegionArg {
    fn regions(self) -> Vec<Region> {
        match self {
            RegionArg::All => vec![Region::All],
            RegionArg::FarField => vec![Region::FarField],
            RegionArg::Both => vec![Region::All, Region::FarField],
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory or directory of prediction PNGs.
    #[arg(long, required_unless_present = "compare", conflicts_with = "compare")]
    pred: Option<PathBuf>,
    /// Sequence directory holding the ground truth.
    #[arg(long, required_unless_present = "compare")]
    gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RegionArg::Both)]
    region: RegionArg,
    /// Compare the metrics of two run directories.
    #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
    compare: Option<Vec<PathBuf>>,
    /// Directory for the metric or comparison CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let message = match err.downcast_ref::<Error>() {
                Some(Error::CheckFailed(m)) => m.clone(),
                Some(e) => e.to_string(),
                None => format!("{err:#}"),
            };
            let message = message.replace('\n', " ");
            eprintln!("nearfar: {kind}: {message}");
            ExitCode::from(code)
        }
    }
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    match err.downcast_ref::<Error>() {
        Some(e @ Error::Config(_)) => (e.kind(), 1),
        Some(e @ Error::CheckFailed(_)) => (e.kind(), 3),
        Some(e) => (e.kind(), 2),
        None => ("error", 2),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn synth_gen(a: SynthGenArgs) -> anyhow::Result<()> {
    let spec = match (a.benchmark, &a.scene) {
        (Some(Benchmark::Shift), _) => make_shift_sequence(a.seed),
        (Some(Benchmark::Pretrain), _) => make_pretrain_sequence(a.seed, a.frames),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            SceneSpec::from_toml(&text)?
        }
        (None, None) => unreachable!("clap requires a scene source"),
    };
    let summary = export_sequence(&spec, &a.out)?;
    println!("frames {}", summary.frames);
    println!("digest {}", summary.digest);
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let cfg = PretrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..Default::default()
    };
    let (file, report) = pretrain(&a.train, &cfg, &a.test_seeds)?;
    file.save(&a.out)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {l:.6}", i + 1);
    }
    println!(
        "frames used {} skipped {} train seeds {:?}",
        report.frames_used, report.frames_skipped, report.train_seeds
    );
    match report.epoch_losses.last() {
        Some(l) => println!("final loss {l:.6}"),
        None => println!("final loss n/a (no epochs)"),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.sequence {
        cfg.sequence = v;
    }
    if let Some(v) = a.intrinsics {
        cfg.intrinsics = Some(v);
    }
    if let Some(v) = a.params {
        cfg.params = v;
    }
    if let Some(v) = a.output {
        cfg.output = v;
    }
    if let Some(v) = a.mode {
        cfg.mode = match v {
            ModeArg::Online => Mode::Online,
            ModeArg::Frozen => Mode::Frozen,
        };
    }
    if let Some(v) = a.infer_every_k {
        cfg.infer_every_k = v;
    }
    if let Some(v) = a.steps_per_frame {
        cfg.online.steps_per_frame = v;
    }
    if let Some(v) = a.seed {
        cfg.online.rng_seed = v;
    }
    if a.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let outcome = replay(&cfg)?;
    let s = &outcome.summary;
    println!(
        "frames {} inferred {} plane failures {}",
        s.frames, s.inferred_frames, s.plane_failures
    );
    println!("params {} -> {}", s.initial_params, s.final_params);
    print_optional("mean IoU (all)", s.miou_all);
    print_optional("mean IoU (far field)", s.miou_far_field);
    println!("wrote {}", cfg.output.display());
    Ok(())
}

fn print_optional(label: &str, v: Option<f64>) {
    match v {
        Some(v) => println!("{label} {v:.4}"),
        None => println!("{label} n/a"),
    }
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    if let Some(runs) = &a.compare {
        let comparisons = compare_run_dirs(&runs[0], &runs[1])?;
        for c in &comparisons {
            print!("{}", c.summary());
            if let Some(out) = &a.out {
                write_out(out, comparison_file_name(c.region), &c.to_csv())?;
            }
        }
        return Ok(());
    }
    let (pred, gt) = (a.pred.as_deref().expect("clap"), a.gt.as_deref().expect("clap"));
    let reports = eval(pred, gt, &a.region.regions())?;
    println!(
        "{:<10} {:>9} {:>12} {:>9} {:>9} {:>9}",
        "region", "iou_free", "iou_obstacle", "miou", "ap", "accuracy"
    );
    for r in &reports {
        let cells: Vec<String> = r
            .aggregate()
            .iter()
            .map(|v| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}")))
            .collect();
        println!(
            "{:<10} {:>9} {:>12} {:>9} {:>9} {:>9}",
            r.region.tag(),
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            cells[4]
        );
        if let Some(out) = &a.out {
            write_out(out, metrics_file_name(r.region), &r.to_csv())?;
        }
    }
    Ok(())
}

fn write_out(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let report = gradcheck(a.seed, a.corrupt_gradient)?;
    print!("{}", format_gradcheck(&report));
    if !report.passed() {
        bail!(Error::CheckFailed(format!(
            "worst relative error {:.3e} exceeds {:e}",
            report.worst(),
            report.tolerance
        )));
    }
    Ok(())
}
