//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when the invocation itself is wrong (bad
//! flags, missing config file, empty dataset directory), 2 when the work
//! fails at run time.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::csngf::{argmax_displacement, similarity_map_fft, write_map, DEFAULT_GAMMA};
use crate::error::Error;
use crate::eval::{
    bench_oracle, evaluation_outputs, read_dataset, run_trials, write_bench_csv,
    write_cumulative_csv, write_dataset, write_trials_csv, DatasetSpec, Variant,
    DEFAULT_DIRECT_CAP, MANIFEST, SUCCESS_THRESHOLD_VX,
};
use crate::ngf::{ngf, Measure, NgfConfig};
use crate::search::{global_search, PyramidConfig, RegistrationConfig, SearchConfig};
use crate::volume::{load_volume, Dims};
use crate::xcorr::FftEngine;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "csngf",
    version,
    about = "Global rigid registration of multimodal volumes by FFT-based gradient-field similarity"
)]
pub struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find the rigid transform aligning a floating volume to a reference.
    Register(RegisterArgs),
    /// Dump the zero-rotation similarity map over all integer shifts.
    CsngfMap(MapArgs),
    /// Generate a synthetic trial set with known ground truth.
    GenDataset(GenArgs),
    /// Run the global search on every trial of a dataset.
    Evaluate(EvaluateArgs),
    /// Time the FFT map against the direct nested-loop map.
    Bench(BenchArgs),
}

/// Options that override the search configuration.
#[derive(Debug, Args)]
pub struct SearchFlags {
    /// JSON file with pyramid vectors and search options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Minimum overlap as a fraction of the largest overlap.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub measure: Option<Measure>,
    /// Negate the floating intensities before the search.
    #[arg(long)]
    pub invert_floating: bool,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Reference volume header (JSON).
    pub reference: PathBuf,
    /// Floating volume header (JSON).
    pub floating: PathBuf,
    #[command(flatten)]
    pub search: SearchFlags,
    /// Where to write the result JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    pub reference: PathBuf,
    pub floating: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = Measure::Squared)]
    pub measure: Measure,
    #[arg(long, default_value_t = NgfConfig::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Header path of the dumped map.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset spec JSON; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of default, reduced, smoke.
    #[arg(long, default_value = "reduced")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory written by gen-dataset.
    pub dataset: PathBuf,
    #[command(flatten)]
    pub search: SearchFlags,
    /// Comma-separated variants; defaults to all three.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[arg(long, default_value_t = SUCCESS_THRESHOLD_VX)]
    pub threshold: f64,
    /// Output directory for trials.csv and cumulative.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated cube sides.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Largest size the direct method may run on.
    #[arg(long, default_value_t = DEFAULT_DIRECT_CAP)]
    pub cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `csngf --help` for usage");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Runs a parsed command on a pool with the requested thread count.
fn execute(cli: Cli) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Failure::Usage(format!("cannot build thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Register(a) => register(a),
        Command::CsngfMap(a) => csngf_map(a),
        Command::GenDataset(a) => gen_dataset(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
    })
}

fn read_text(path: &Path, what: &str) -> std::result::Result<String, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("{what} {} not found", path.display())));
    }
    fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

/// The config file if given, otherwise the default schedule scaled to
/// `voxels`, with command-line overrides applied last.
fn resolve_config(flags: &SearchFlags, voxels: usize) -> std::result::Result<RegistrationConfig, Failure> {
    let mut cfg = match &flags.config {
        Some(path) => RegistrationConfig::from_json(&read_text(path, "config file")?).map_err(usage)?,
        None => RegistrationConfig::new(
            PyramidConfig::default().scaled_for(voxels),
            SearchConfig::default(),
        ),
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(gamma) = flags.gamma {
        cfg.gamma = gamma;
    }
    if let Some(measure) = flags.measure {
        cfg.measure = measure;
    }
    cfg.invert_floating |= flags.invert_floating;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn register(args: RegisterArgs) -> Outcome {
    let (reference, reference_mask) = load_volume(&args.reference)?;
    let (floating, floating_mask) = load_volume(&args.floating)?;
    let cfg = resolve_config(&args.search, reference.dims().len())?;
    let engine = FftEngine::new();
    let result = global_search(
        &engine,
        (&reference, &reference_mask),
        (&floating, &floating_mask),
        &cfg.pyramid,
        &cfg.search(),
    )?;
    write_file(&args.out, &result.to_json())?;
    let t = &result.transform;
    println!(
        "euler_deg = {:?}  translation_vx = {:?}",
        t.euler_deg, t.translation_vx
    );
    println!("score = {}  wall_time_s = {:.3}", result.score, result.wall_time_s);
    Ok(())
}

fn csngf_map(args: MapArgs) -> Outcome {
    if !(args.gamma > 0.0 && args.gamma <= 1.0) {
        return Err(Failure::Usage(format!("--gamma must be in (0, 1], got {}", args.gamma)));
    }
    let cfg = NgfConfig::new(args.epsilon).map_err(usage)?;
    let (reference, reference_mask) = load_volume(&args.reference)?;
    let (floating, floating_mask) = load_volume(&args.floating)?;
    let na = ngf(&reference, &reference_mask, cfg)?;
    let nb = ngf(&floating, &floating_mask, cfg)?;
    let engine = FftEngine::new();
    let map = similarity_map_fft(
        &engine,
        &na,
        &reference_mask,
        &nb,
        &floating_mask,
        args.gamma,
        args.measure,
    )?;
    let (chi, score) = argmax_displacement(&map)?;
    write_map(&map, &args.out)?;
    println!(
        "lattice {}  valid {}  argmax chi = {:?}  score = {}",
        map.lattice_dims(),
        map.valid_count(),
        chi,
        score
    );
    Ok(())
}

fn gen_dataset(args: GenArgs) -> Outcome {
    let mut spec = match &args.config {
        Some(path) => DatasetSpec::from_json(&read_text(path, "dataset spec")?).map_err(usage)?,
        None => DatasetSpec::preset(&args.preset).map_err(usage)?,
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.trials {
        if n == 0 {
            return Err(Failure::Usage("--trials must be at least 1".into()));
        }
        spec.trials = n;
    }
    let manifest = write_dataset(&spec, &args.out)?;
    println!(
        "wrote {} trials of {} to {}",
        manifest.trials.len(),
        spec.block,
        args.out.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Outcome {
    if !args.dataset.join(MANIFEST).is_file() {
        return Err(Failure::Usage(format!(
            "{} holds no dataset (missing {MANIFEST})",
            args.dataset.display()
        )));
    }
    let cases = read_dataset(&args.dataset)?;
    let Some(first) = cases.first() else {
        return Err(Failure::Usage(format!("{} lists no trials", args.dataset.display())));
    };
    let block: Dims = first.trial.reference.dims();
    let cfg = resolve_config(&args.search, block.len())?;
    let variants = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants.clone()
    };
    let engine = FftEngine::new();
    let eval = run_trials(&engine, &cases, &cfg.pyramid, &cfg.search(), &variants, args.threshold)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let [trials, cumulative] = evaluation_outputs(&args.out);
    write_trials_csv(&trials, &eval.records)?;
    write_cumulative_csv(&cumulative, &eval)?;
    for v in &variants {
        println!(
            "{v}: {}/{} trials with d_E < {}",
            eval.successes(*v),
            cases.len(),
            args.threshold
        );
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Outcome {
    if args.sizes.is_empty() {
        return Err(Failure::Usage("--sizes must list at least one size".into()));
    }
    let rows = bench_oracle(&args.sizes, args.repeats, args.cap, args.seed)
        .map_err(usage)?;
    write_bench_csv(&args.out, &rows)?;
    for r in &rows {
        println!(
            "{:>4}^3  direct {:.4} s  fft {:.4} s  ratio {:.1}",
            r.size, r.t_direct_s, r.t_fft_s, r.ratio
        );
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}
