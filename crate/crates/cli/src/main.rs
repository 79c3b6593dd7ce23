//! `pandiff`: synthetic data, training, sampling, evaluation and ablations
//! for analog-bit diffusion panoptic segmentation.
//!
//! Settings come from the built-in defaults, then the `--config` JSON file,
//! then command-line flags; later sources win.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use panoptic_diffusion::app::{
    cmd_ablate, cmd_eval, cmd_gendata, cmd_sample, cmd_train, EvalMode, EvalReport, GendataArgs,
    GridSpec, Precision, RunConfig, SampleArgs, TrainArgs,
};
use panoptic_diffusion::metrics::{pq_table, video_table};
use panoptic_diffusion::scenes::Split;
use panoptic_diffusion::train::LossKind;

#[derive(Parser)]
#[command(
    name = "pandiff",
    version,
    about = "Panoptic segmentation as analog-bit diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset: images, masks and a manifest.
    Gendata(GendataCmd),
    /// Train the denoiser on a dataset (images, or videos for fine-tuning).
    Train(TrainCmd),
    /// Segment images or videos with a trained checkpoint.
    Sample(SampleCmd),
    /// Score predicted masks against ground truth.
    Eval(EvalCmd),
    /// Train and score one model per grid cell and tabulate the results.
    Ablate(AblateCmd),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    L2,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossKind::CrossEntropy,
            LossArg::L2 => LossKind::L2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pq,
    Jf,
    Track,
}

#[derive(Args)]
struct GendataCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Number of images (videos with --video).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    video: bool,
    /// Scene generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Model and objective overrides shared by `train` and `ablate`.
#[derive(Args)]
struct ModelFlags {
    /// Analog bit magnitude b.
    #[arg(long)]
    input_scale: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Loss weighting exponent p.
    #[arg(long)]
    weight_power: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// Dataset directory written by `gendata`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Image checkpoint to fine-tune from (video mode).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Fine-tune on videos, conditioning on past masks.
    #[arg(long)]
    video: bool,
    /// Optimization steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory, directory of .ppm images, or one .ppm image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Segment videos frame by frame, conditioning on earlier predictions.
    #[arg(long)]
    video: bool,
    /// Sampling steps per image.
    #[arg(long)]
    steps: Option<usize>,
    /// Time difference added to the next step's time.
    #[arg(long)]
    td: Option<f64>,
    /// Drop predicted instances smaller than this many pixels.
    #[arg(long)]
    min_pixels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampling steps for the first video frame.
    #[arg(long)]
    steps_first: Option<usize>,
    /// Sampling steps for later video frames.
    #[arg(long)]
    steps_rest: Option<usize>,
    /// Write the decoded prediction after these sampling steps (comma separated).
    #[arg(long, value_delimiter = ',')]
    dump_trajectory: Vec<usize>,
    /// Sample with the raw weights instead of their moving average.
    #[arg(long)]
    raw_weights: bool,
    #[arg(long)]
    no_overlays: bool,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    /// Directory of predicted masks, named as in the ground-truth manifest.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "pq")]
    mode: ModeArg,
    /// Report directory; defaults to the prediction directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    boundary_radius: Option<usize>,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// JSON grid specification; missing keys take their defaults.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    losses: Option<Vec<LossArg>>,
    #[arg(long, value_delimiter = ',')]
    weight_powers: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    td: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    min_pixels: Option<Vec<usize>>,
    /// Optimization steps per trained cell.
    #[arg(long)]
    train_steps: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = common.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelFlags) {
    if let Some(b) = m.input_scale {
        cfg.net.codec.scale = b;
    }
    if let Some(l) = m.loss {
        cfg.train.loss = l.into();
        cfg.video.train.loss = l.into();
    }
    if let Some(p) = m.weight_power {
        cfg.train.weight_power = p;
        cfg.video.train.weight_power = p;
    }
    if let Some(lr) = m.lr {
        cfg.train.adam.lr = lr;
        cfg.video.train.adam.lr = lr;
    }
    if let Some(w) = m.width {
        cfg.net.width = w;
    }
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    }
}

fn gendata(c: GendataCmd) -> Result<()> {
    let mut cfg = load_config(&c.common)?;
    if let Some(s) = c.seed {
        cfg.scene.seed = s;
    }
    let args = GendataArgs {
        out: c.out,
        split: split(c.split),
        size: c.size,
        video: c.video,
    };
    let rows = cmd_gendata(&cfg, &args)?;
    println!("wrote {} samples to {}", rows.len(), args.out.display());
    Ok(())
}

fn train(c: TrainCmd) -> Result<()> {
    let mut cfg = load_config(&c.common)?;
    apply_model(&mut cfg, &c.model);
    let tc = if c.video {
        &mut cfg.video.train
    } else {
        &mut cfg.train
    };
    if let Some(s) = c.steps {
        tc.steps = s;
    }
    if let Some(b) = c.batch_size {
        tc.batch_size = b;
    }
    if let Some(n) = c.checkpoint_every {
        tc.checkpoint_every = n;
    }
    if let Some(s) = c.seed {
        tc.seed = s;
    }
    let args = TrainArgs {
        data: c.data,
        out: c.out,
        resume: c.resume,
        init: c.init,
        video: c.video,
    };
    let outcome = cmd_train(&cfg, &args)?;
    let last = outcome.rows.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained to step {} (last loss {last:.4}); checkpoint {}",
        outcome.step,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn sample(c: SampleCmd) -> Result<()> {
    let mut cfg = load_config(&c.common)?;
    let s = &mut cfg.sampler;
    let v = &mut cfg.video.sampler;
    if let Some(n) = c.steps {
        s.steps = n;
    }
    if let Some(td) = c.td {
        s.td = td;
        v.td = td;
    }
    if let Some(m) = c.min_pixels {
        cfg.eval.min_pixels = m;
        v.min_pixels = m;
    }
    if let Some(seed) = c.seed {
        s.seed = seed;
        v.seed = seed;
    }
    if let Some(n) = c.steps_first {
        v.steps_first = n;
    }
    if let Some(n) = c.steps_rest {
        v.steps_rest = n;
    }
    if c.raw_weights {
        cfg.eval.use_ema = false;
    }
    let args = SampleArgs {
        checkpoint: c.checkpoint,
        input: c.input,
        out: c.out,
        video: c.video,
        trajectory_steps: c.dump_trajectory,
        overlays: !c.no_overlays,
    };
    let rows = cmd_sample(&cfg, &args)?;
    println!("wrote {} masks to {}", rows.len(), args.out.display());
    Ok(())
}

fn eval(c: EvalCmd) -> Result<()> {
    let mut cfg = load_config(&c.common)?;
    if let Some(r) = c.boundary_radius {
        cfg.eval.boundary_radius = Some(r);
    }
    let mode = match c.mode {
        ModeArg::Pq => EvalMode::Pq,
        ModeArg::Jf => EvalMode::Jf,
        ModeArg::Track => EvalMode::Track,
    };
    let out = c.out.unwrap_or_else(|| c.pred.clone());
    match cmd_eval(&cfg, &c.pred, &c.gt, mode, &out)? {
        EvalReport::Pq(r) => print!("{}", pq_table(&[("all".into(), r)])),
        EvalReport::Video { pooled, .. } => print!(
            "{}",
            video_table(&[("mean".into(), pooled)], mode == EvalMode::Track)
        ),
    }
    Ok(())
}

fn ablate(c: AblateCmd) -> Result<()> {
    let mut cfg = load_config(&c.common)?;
    apply_model(&mut cfg, &c.model);
    let mut grid = match &c.grid {
        Some(p) => GridSpec::load(p)?,
        None => GridSpec::default(),
    };
    if let Some(v) = c.scales {
        grid.scales = v;
    }
    if let Some(v) = c.losses {
        grid.losses = v.into_iter().map(Into::into).collect();
    }
    if let Some(v) = c.weight_powers {
        grid.weight_powers = v;
    }
    if let Some(v) = c.steps {
        grid.steps = v;
    }
    if let Some(v) = c.td {
        grid.td = v;
    }
    if let Some(v) = c.min_pixels {
        grid.min_pixels = v;
    }
    if let Some(n) = c.train_steps {
        grid.train_steps = n;
    }
    if let Some(n) = c.train_size {
        grid.train_size = n;
    }
    if let Some(n) = c.val_size {
        grid.val_size = n;
    }
    let rows = cmd_ablate(&cfg, &grid, &c.out, |r| {
        let pq =
            r.pq.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x));
        eprintln!("{} = {}: PQ {pq} ({:.1}s)", r.table, r.value, r.seconds());
    })?;
    let text =
        std::fs::read_to_string(c.out.join("ablation.txt")).context("reading ablation table")?;
    print!("{text}");
    eprintln!("{} cells", rows.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gendata(c) => gendata(c),
        Command::Train(c) => train(c),
        Command::Sample(c) => sample(c),
        Command::Eval(c) => eval(c),
        Command::Ablate(c) => ablate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
