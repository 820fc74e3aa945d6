//! Transforms a seeded raster in materialized and pipelined mode and
//! reports how many items each mode read and wrote.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use empipe::builtin::parallel::default_workers;
use empipe::raster::{format_text, format_tsv, CellMap, IoReport, Mode, Raster, RasterJob, Transform, TransformKind};
use empipe::{BlockConfig, Error, Executor, NullProgress, ProgressIndicator, Result, Storage, TextProgress};

#[derive(Parser)]
#[command(name = "raster-demo", version, about = "External-memory raster transformation demo")]
struct Cli {
    #[command(flatten)]
    opts: Options,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the phases of the pipelined transform without running it.
    Plan,
}

#[derive(Args)]
struct Options {
    #[arg(long, default_value_t = 1024, global = true)]
    width: u32,

    #[arg(long, default_value_t = 1024, global = true)]
    height: u32,

    #[arg(long, value_enum, default_value_t = TransformArg::Transpose, global = true)]
    transform: TransformArg,

    /// Seed for the cell values and for block-shuffle.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,

    #[arg(long, value_enum, default_value_t = ModeArg::Both, global = true)]
    mode: ModeArg,

    /// Items per block.
    #[arg(long, default_value_t = 4096, global = true)]
    block_size: u64,

    /// Memory budget in bytes.
    #[arg(long, default_value_t = 4 << 20, global = true)]
    memory: u64,

    /// Directory for the rasters and temporary streams.
    #[arg(long, global = true)]
    tmpdir: Option<PathBuf>,

    /// Phase timing database used for progress estimates.
    #[arg(long, global = true)]
    timedb: Option<PathBuf>,

    /// Worker threads for the transform step [default: available cores]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,

    #[arg(long, value_enum, default_value_t = ReportArg::Text, global = true)]
    report: ReportArg,

    #[arg(long, global = true)]
    no_progress: bool,

    /// Check every output cell against direct evaluation.
    #[arg(long, global = true)]
    verify: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformArg {
    Identity,
    Transpose,
    Rot90,
    BlockShuffle,
}

impl From<TransformArg> for TransformKind {
    fn from(t: TransformArg) -> Self {
        match t {
            TransformArg::Identity => TransformKind::Identity,
            TransformArg::Transpose => TransformKind::Transpose,
            TransformArg::Rot90 => TransformKind::Rot90,
            TransformArg::BlockShuffle => TransformKind::BlockShuffle,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Pipelined,
    Materialized,
    Both,
}

impl ModeArg {
    fn modes(self) -> &'static [Mode] {
        match self {
            ModeArg::Pipelined => &[Mode::Pipelined],
            ModeArg::Materialized => &[Mode::Materialized],
            ModeArg::Both => &[Mode::Materialized, Mode::Pipelined],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Text,
    Tsv,
}

struct Setup {
    storage: Storage,
    job: RasterJob,
    _work: tempfile::TempDir,
}

fn setup(opts: &Options) -> Result<Setup> {
    let config = BlockConfig::new(opts.block_size, opts.memory, 16)?;
    let tmpdir = opts.tmpdir.clone().unwrap_or_else(std::env::temp_dir);
    let work = tempfile::Builder::new().prefix("raster-demo").tempdir_in(&tmpdir)?;
    let storage = Storage::with_tmpdir(config, work.path())?;
    let map = Arc::new(Transform::new(opts.transform.into(), (opts.width, opts.height), opts.seed));
    let workers = opts.workers.map_or_else(default_workers, |w| w as usize);
    Ok(Setup {
        storage,
        job: RasterJob::new(map).workers(workers),
        _work: work,
    })
}

fn plan(opts: &Options) -> Result<String> {
    let s = setup(opts)?;
    let input = Raster::from_seed(opts.width, opts.height, opts.seed)?.store(&s.storage, s.storage.tmpdir().join("A"))?;
    let (ow, oh) = s.job.map().output_dims();
    let mut pipeline = s.job.pipeline(&s.storage, &input, s.storage.tmpdir().join("B"));
    pipeline.forward("inputsize", (opts.width as u64, opts.height as u64));
    pipeline.forward("outputsize", (ow as u64, oh as u64));
    let graph = pipeline.graph();
    Ok(graph.plan()?.report(&graph, Some(opts.memory)))
}

fn run(opts: &Options) -> Result<String> {
    let mut s = setup(opts)?;
    let a = Raster::from_seed(opts.width, opts.height, opts.seed)?;
    let input = a.store(&s.storage, s.storage.tmpdir().join("A"))?;
    let mut executor = Executor::new(&s.storage);
    if let Some(path) = &opts.timedb {
        executor = executor.with_timedb(path);
    }
    let progress: Arc<dyn ProgressIndicator> = if opts.no_progress {
        Arc::new(NullProgress)
    } else {
        Arc::new(TextProgress::new())
    };
    s.job = s.job.progress(progress);

    let mut reports: Vec<IoReport> = Vec::new();
    let mut outputs = Vec::new();
    for &mode in opts.mode.modes() {
        let path = s.storage.tmpdir().join(format!("B-{mode}"));
        let run = s.job.run(mode, &executor, &input, path)?;
        reports.push(run.report);
        if opts.verify || opts.mode == ModeArg::Both {
            outputs.push((mode, run.output.load(&s.storage)?));
        }
    }

    if let [(_, first), rest @ ..] = outputs.as_slice() {
        for (mode, b) in rest {
            if b != first {
                return Err(Error::Invalid(format!("{mode} output differs from {}", outputs[0].0)));
            }
        }
    }
    if opts.verify {
        let map: &dyn CellMap = s.job.map().as_ref();
        let (ow, oh) = map.output_dims();
        for (mode, b) in &outputs {
            for y in 0..oh {
                for x in 0..ow {
                    let (sx, sy) = map.source(x, y);
                    if b.get(x, y) != a.get(sx as u32, sy as u32) {
                        return Err(Error::Invalid(format!("{mode} output is wrong at cell ({x}, {y})")));
                    }
                }
            }
        }
        eprintln!("verified {} output cells per mode", ow as u64 * oh as u64);
    }

    Ok(match opts.report {
        ReportArg::Text => format_text(&reports),
        ReportArg::Tsv => format_tsv(&reports),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Some(Command::Plan) => plan(&cli.opts),
        None => run(&cli.opts),
    };
    match outcome {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
