use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hierasparse::compressor::{baseline_bytes, compress, decompress, measure_size, SizeBreakdown};
use hierasparse::container;
use hierasparse::cost::{cost_report, sweep, CostParams};
use hierasparse::nm::{GroupingAxis, NmPattern};
use hierasparse::pipeline::{run_pipeline, synthetic_tensor, PhaseSelection, PhaseSparsity, RunConfig};
use hierasparse::pruner::{prune_single, SparsityConfig};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Validation(_) => 4,
        }
    }
}

impl From<hierasparse::Error> for CliError {
    fn from(e: hierasparse::Error) -> Self {
        use hierasparse::Error as E;
        match e {
            E::Config(_) | E::Shape(_) | E::InvalidPattern { .. } | E::UnsupportedPattern { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hierasparse", version, about = "Hierarchical 2:4 KV-cache sparsity toolkit")]
struct Cli {
    /// Directory for relative output paths.
    #[arg(long, global = true, env = "HIERASPARSE_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Prune, compress and run attention on synthetic data; emit a JSON report.
    Run(RunArgs),
    /// Closed-form compression and speedup model for one sparsity pair.
    Cost(CostArgs),
    /// Cost model over a grid of (s_key, s_value).
    Sweep(SweepArgs),
    /// Compress a synthetic cache and write it as a container file.
    SaveCache(SaveArgs),
    /// Validate a container file and print its layout summary.
    LoadCache(LoadArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
    Both,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    gqa_group: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, value_enum)]
    phase: Option<PhaseArg>,
    #[arg(long)]
    prefill_s_key: Option<f64>,
    #[arg(long)]
    prefill_s_value: Option<f64>,
    #[arg(long)]
    decode_s_key: Option<f64>,
    #[arg(long)]
    decode_s_value: Option<f64>,
    #[arg(long)]
    sink_tokens: Option<usize>,
    #[arg(long)]
    local_window: Option<usize>,
    #[arg(long)]
    causal: Option<bool>,
    #[arg(long)]
    b_r: Option<usize>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Leave wall-clock timings out of the report.
    #[arg(long)]
    no_timings: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 4096)]
    seq_len: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 64)]
    block_size: usize,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long, default_value_t = 0.0)]
    s_key: f64,
    #[arg(long, default_value_t = 0.0)]
    s_value: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 0.25)]
    step: f64,
    #[command(flatten)]
    model: ModelArgs,
    /// Flat CSV instead of JSON.
    #[arg(long)]
    csv: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Key,
    Value,
}

#[derive(Debug, Args)]
struct SaveArgs {
    /// Container file to write.
    path: PathBuf,
    #[arg(long, value_enum, default_value = "key")]
    kind: KindArg,
    #[arg(long, default_value_t = 1024)]
    seq_len: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 64)]
    block_size: usize,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    sink_tokens: usize,
    #[arg(long, default_value_t = 0)]
    local_window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct LoadArgs {
    path: PathBuf,
}

fn resolve(out_dir: &Option<PathBuf>, path: &Path) -> PathBuf {
    match out_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_output(out_dir: &Option<PathBuf>, output: Option<&Path>, text: &str) -> CliResult<()> {
    match output {
        Some(p) => write_file(&resolve(out_dir, p), text.as_bytes()),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|source| CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types always serialize");
    s.push('\n');
    s
}

fn run_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.$field = v; })* };
    }
    set!(
        seq_len,
        head_dim,
        heads,
        gqa_group,
        block_size,
        sink_tokens,
        local_window,
        causal,
        b_r,
        splits,
        seed
    );
    if let Some(p) = args.phase {
        cfg.phase = match p {
            PhaseArg::Prefill => PhaseSelection::Prefill,
            PhaseArg::Decode => PhaseSelection::Decode,
            PhaseArg::Both => PhaseSelection::Both,
        };
    }
    let pair = |base: PhaseSparsity, k: Option<f64>, v: Option<f64>| PhaseSparsity {
        s_key: k.unwrap_or(base.s_key),
        s_value: v.unwrap_or(base.s_value),
    };
    cfg.prefill = pair(cfg.prefill, args.prefill_s_key, args.prefill_s_value);
    cfg.decode = pair(cfg.decode, args.decode_s_key, args.decode_s_value);
    if let Some(o) = &args.output {
        cfg.output = Some(o.display().to_string());
    }
    Ok(cfg)
}

fn cost_params(m: &ModelArgs, s_key: f64, s_value: f64) -> CostParams {
    CostParams {
        seq_len: m.seq_len,
        head_dim: m.head_dim,
        block_size: m.block_size,
        s_key,
        s_value,
        dense_throughput: 1.0,
    }
}

#[derive(Serialize)]
struct CacheSummary {
    path: String,
    bytes: usize,
    axis: GroupingAxis,
    seq_len: usize,
    head_dim: usize,
    block_size: usize,
    blocks: usize,
    dense_blocks: usize,
    sparse_blocks: usize,
    sizes: SizeBreakdown,
    baseline_bytes: u64,
    compression_ratio: f64,
}

fn summarize(path: &Path, bytes: usize, c: &hierasparse::CompressedCache) -> CacheSummary {
    let sizes = measure_size(c);
    let baseline = baseline_bytes(c);
    CacheSummary {
        path: path.display().to_string(),
        bytes,
        axis: c.axis(),
        seq_len: c.seq_len(),
        head_dim: c.head_dim(),
        block_size: c.block_size(),
        blocks: c.block_count(),
        dense_blocks: c.dense_count(),
        sparse_blocks: c.sparse_count(),
        sizes,
        baseline_bytes: baseline,
        compression_ratio: if sizes.total() == 0 {
            1.0
        } else {
            baseline as f64 / sizes.total() as f64
        },
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let out_dir = cli.out_dir;
    match cli.command {
        Command::Run(args) => {
            let cfg = run_config(&args)?;
            let mut report = run_pipeline(&cfg)?;
            if args.no_timings {
                report = report.without_timings();
            }
            write_output(&out_dir, args.output.as_deref(), &to_json(&report))
        }
        Command::Cost(args) => {
            let report = cost_report(&cost_params(&args.model, args.s_key, args.s_value))?;
            write_output(&out_dir, args.output.as_deref(), &to_json(&report))
        }
        Command::Sweep(args) => {
            let rows = sweep(&cost_params(&args.model, 0.0, 0.0), args.step)?;
            let text = if args.csv {
                let mut w = csv::Writer::from_writer(Vec::new());
                for r in &rows {
                    w.serialize(r).map_err(|e| CliError::Validation(e.to_string()))?;
                }
                let bytes = w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?;
                String::from_utf8(bytes).expect("csv output is utf-8")
            } else {
                to_json(&rows)
            };
            write_output(&out_dir, args.output.as_deref(), &text)
        }
        Command::SaveCache(args) => {
            let axis = match args.kind {
                KindArg::Key => GroupingAxis::HeadDim,
                KindArg::Value => GroupingAxis::Sequence,
            };
            let cfg = SparsityConfig {
                s_key: args.sparsity,
                s_value: args.sparsity,
                block_size: args.block_size,
                pattern: NmPattern::TWO_FOUR,
                sink_tokens: args.sink_tokens,
                local_window: args.local_window,
            };
            let x = synthetic_tensor(args.seq_len, args.head_dim, args.seed);
            let mask = prune_single(&x, axis, &cfg)?;
            let c = compress(&x, &mask, &cfg)?;
            let bytes = container::serialize(&c)?;
            let path = resolve(&out_dir, &args.path);
            write_file(&path, &bytes)?;
            write_output(&None, None, &to_json(&summarize(&path, bytes.len(), &c)))
        }
        Command::LoadCache(args) => {
            let path = resolve(&out_dir, &args.path);
            let bytes = fs::read(&path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            let c = container::parse(&bytes)?;
            decompress(&c)?;
            write_output(&None, None, &to_json(&summarize(&path, bytes.len(), &c)))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
