mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use implantformer::volume::Region;
use implantformer::Error;

/// Implant position prediction on dental CBCT volumes.
#[derive(Parser, Debug)]
#[command(name = "implantformer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic CBCT phantoms.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Move annotations between root and crown slices.
    #[command(subcommand)]
    Labels(LabelsCmd),
    /// Train a network on crown (or root) slices of a patient directory.
    Train(TrainArgs),
    /// Detect on crown slices and back-project to the root.
    Infer(InferArgs),
    /// Average precision and distance histogram for detection files.
    Eval(EvalArgs),
    /// Burn an implant cylinder into a volume.
    Render(RenderArgs),
    /// CSV and SVG exports of an evaluation report.
    #[command(subcommand)]
    Plot(PlotCmd),
}

#[derive(Subcommand, Debug)]
enum PhantomCmd {
    /// Writes `<id>.ivol` and `<id>.root.json` per patient.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    patients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Half-width of the per-patient tilt range (pixels per slice).
    #[arg(long, default_value_t = 0.04)]
    tilt_jitter: f64,
    /// JSON phantom parameters; defaults to a 64x64x40 volume.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum LabelsCmd {
    /// Extend a root track into every crown slice.
    ProjectToCrown(ProjectArgs),
    /// Fit a crown track and evaluate it on every root slice.
    ProjectToRoot(ProjectArgs),
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    track: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegionArg {
    Crown,
    Root,
}

impl From<RegionArg> for Region {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Crown => Region::Crown,
            RegionArg::Root => Region::Root,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of `<id>.ivol` + `<id>.root.json` pairs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    net_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RegionArg::Crown)]
    region: RegionArg,
    /// Hold out this fold (0-4) of the seeded five-fold split.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Volume file or glob pattern.
    #[arg(long)]
    volume: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    top_k: usize,
    #[arg(long, default_value_t = 0.0)]
    min_confidence: f64,
    /// Fold tag written into the detection files.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Detection or track files (glob).
    #[arg(long)]
    pred: String,
    /// Ground-truth track files (glob).
    #[arg(long)]
    gt: String,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75")]
    iou: Vec<f64>,
    /// Side of the square box around each keypoint, in pixels.
    #[arg(long = "box", default_value_t = 21.0)]
    box_size: f64,
    #[arg(long, default_value_t = 5.0)]
    bin_width: f64,
    #[arg(long)]
    eleven_point: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Root track, e.g. the `.root.pred.json` written by `infer`.
    #[arg(long)]
    track: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    radius: f64,
    /// Root slices below the crown boundary to fill.
    #[arg(long, default_value_t = 10)]
    depth: usize,
    #[arg(long, default_value_t = 3100, allow_negative_numbers = true)]
    value: i16,
}

#[derive(Subcommand, Debug)]
enum PlotCmd {
    /// Histogram of prediction-to-truth distances.
    DistanceHist(PlotArgs),
    /// Precision-recall curve at one IoU threshold.
    PrCurve(PrArgs),
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrArgs {
    #[command(flatten)]
    common: PlotArgs,
    #[arg(long, default_value_t = 0.75)]
    iou: f64,
}

/// Process exit codes, one per error class. Usage errors exit with 2 (clap).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Io = 3,
    Format = 4,
    Config = 5,
    Data = 6,
    Numeric = 7,
}

pub fn exit_class(e: &Error) -> Exit {
    match e {
        Error::Io { .. } => Exit::Io,
        Error::MalformedHeader(_) | Error::SizeMismatch { .. } | Error::Json(_) => Exit::Format,
        Error::InvalidConfig(_) | Error::BoundaryOutOfRange { .. } => Exit::Config,
        Error::Diverged { .. } | Error::NonFinite(_) | Error::DegenerateFit(_) | Error::TooFewPoints(_) => Exit::Numeric,
        _ => Exit::Data,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("IMPLANTFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("IMPLANTFORMER_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Phantom(PhantomCmd::Generate(a)) => commands::phantom_generate(&a),
        Command::Labels(LabelsCmd::ProjectToCrown(a)) => commands::project(&a, Region::Crown),
        Command::Labels(LabelsCmd::ProjectToRoot(a)) => commands::project(&a, Region::Root),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Render(a) => commands::render(&a),
        Command::Plot(PlotCmd::DistanceHist(a)) => commands::plot_hist(&a),
        Command::Plot(PlotCmd::PrCurve(a)) => commands::plot_pr(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e) as u8)
        }
    }
}
