//! `vse`: ingest, clean, fuse, index, search and benchmark face embeddings.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 internal
//! invariant violation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vse_core::eval::{self, BenchOptions, SplitSpec, StrategyConfig, SynthSpec};
use vse_core::gallery::{self, FusionStrategy};
use vse_core::io;
use vse_core::ivf_flat::IvfParams;
use vse_core::ivf_pq::IvfPqParams;
use vse_core::kmeans::DEFAULT_MAX_ITERS;
use vse_core::persist;
use vse_core::{BuildConfig, EmbeddingSet, Error, Index, IndexKind, Rows};

#[derive(Parser)]
#[command(
    name = "vse",
    version,
    about = "Vector similarity search over face embeddings"
)]
struct Cli {
    /// Worker threads for index training and search (default: all cores).
    #[arg(long, global = true, env = "VSE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert CSV or FVB input to an FVB file.
    Ingest(IngestArgs),
    /// Write an FVB file as FVB or CSV (chosen by the output extension).
    Export(ExportArgs),
    /// Train and write an index file.
    Build(BuildArgs),
    /// k-nearest-neighbor search, one TSV line per result.
    Search(SearchArgs),
    /// Remove outliers from every identity and report what was removed.
    Clean(CleanArgs),
    /// Combine paired embeddings into one vector per pair.
    Fuse(FuseArgs),
    /// Withdraw probe images into a validation split.
    Split(SplitArgs),
    /// Score an index on labeled probes.
    Eval(EvalArgs),
    /// Build and score a matrix of index strategies.
    Bench(BenchArgs),
    /// Generate a synthetic identity gallery.
    Synth(SynthArgs),
}

/// An FVB file plus its labels file (default: same path with `.labels`).
#[derive(Args)]
struct Input {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct Output {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    output_labels: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    output: Output,
    /// L2-normalize every row.
    #[arg(long, conflicts_with = "no_normalize")]
    normalize: bool,
    /// Keep rows as given (the default).
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value = "flat")]
    kind: IndexKind,
    /// Number of inverted lists.
    #[arg(long)]
    nlist: Option<usize>,
    /// PQ sub-quantizers; must divide the dimension.
    #[arg(long)]
    m: Option<usize>,
    /// Required for the trained kinds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    /// Train k-means on a seeded subsample of this many rows.
    #[arg(long)]
    train_size: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, short)]
    queries: PathBuf,
    #[arg(long, short, default_value_t = 1)]
    k: usize,
    /// Lists probed per query (default: max(1, nlist/32)).
    #[arg(long)]
    nprobe: Option<usize>,
    /// TSV destination (default: stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CleanArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    output: Output,
    /// JSON-lines report, one line per identity.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    input: Input,
    /// Pair row i of the input with row i of this file instead of row i + N/2.
    #[arg(long)]
    second: Option<PathBuf>,
    #[arg(long)]
    second_labels: Option<PathBuf>,
    #[arg(long)]
    strategy: FusionStrategy,
    /// Skip the final L2 normalization.
    #[arg(long)]
    no_normalize: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long, default_value_t = 1000)]
    identities: usize,
    #[arg(long, default_value_t = 0.8)]
    in_gallery_fraction: f64,
    #[arg(long, default_value_t = 3)]
    probes_per_identity: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    probes: PathBuf,
}

#[derive(Args)]
struct ReportOutput {
    /// JSON array of reports.
    #[arg(long)]
    json: Option<PathBuf>,
    /// TSV table of reports (default: stdout when no output is given).
    #[arg(long)]
    tsv: Option<PathBuf>,
    /// Open-set rejection threshold on squared distance.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    /// Labeled probes; a probe is in-gallery when its label occurs in the index.
    #[arg(long)]
    probes: PathBuf,
    #[arg(long)]
    probe_labels: Option<PathBuf>,
    #[arg(long)]
    nprobe: Option<usize>,
    #[command(flatten)]
    report: ReportOutput,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    gallery_labels: Option<PathBuf>,
    #[arg(long)]
    probes: PathBuf,
    #[arg(long)]
    probe_labels: Option<PathBuf>,
    /// List counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 256])]
    nlist: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    report: ReportOutput,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    identities: usize,
    #[arg(long, default_value_t = 10)]
    per_identity: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn labels_path(fvb: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| io::default_labels_path(fvb))
}

fn read_set(fvb: &Path, labels: &Option<PathBuf>) -> Result<EmbeddingSet, Error> {
    io::read_embeddings(fvb, &labels_path(fvb, labels))
}

fn write_set(set: &EmbeddingSet, out: &Output) -> Result<(), Error> {
    io::write_embeddings(
        set,
        &out.output,
        &labels_path(&out.output, &out.output_labels),
    )
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn emit(text: &str, path: Option<&Path>) -> Result<(), Error> {
    match path {
        Some(p) => io::write_atomic(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn ingest(a: IngestArgs) -> CmdResult {
    let set = if is_csv(&a.input.input) {
        let text = std::fs::read_to_string(&a.input.input).map_err(Error::from)?;
        let (dim, data) = io::parse_csv(&text)?;
        let n = data.len() / dim;
        let labels = match &a.input.labels {
            Some(p) => io::read_labels(p)?,
            None => (0..n).map(|i| i.to_string()).collect(),
        };
        EmbeddingSet::new(dim, data, labels, false)?
    } else {
        read_set(&a.input.input, &a.input.labels)?
    };
    let set = if a.normalize { set.normalized()? } else { set };
    write_set(&set, &a.output)?;
    Ok(())
}

fn export(a: ExportArgs) -> CmdResult {
    let set = read_set(&a.input.input, &a.input.labels)?;
    if is_csv(&a.output.output) {
        io::write_atomic(&a.output.output, io::format_csv(&set).as_bytes())?;
        if let Some(p) = &a.output.output_labels {
            io::write_atomic(p, io::encode_labels(set.labels())?.as_bytes())?;
        }
    } else {
        write_set(&set, &a.output)?;
    }
    Ok(())
}

fn build(a: BuildArgs) -> CmdResult {
    let config = match a.kind {
        IndexKind::Flat => BuildConfig::Flat,
        kind => {
            let seed = a
                .seed
                .ok_or_else(|| usage(format!("--seed is required for {kind}")))?;
            let nlist = a
                .nlist
                .ok_or_else(|| usage(format!("--nlist is required for {kind}")))?;
            let mut ivf = IvfParams::new(nlist, seed).with_max_iters(a.max_iters);
            if let Some(t) = a.train_size {
                ivf = ivf.with_train_size(t);
            }
            if kind == IndexKind::IvfFlat {
                BuildConfig::IvfFlat(ivf)
            } else {
                let m = a.m.ok_or_else(|| usage("--m is required for ivf-pq"))?;
                BuildConfig::IvfPq(IvfPqParams { ivf, m })
            }
        }
    };
    let set = read_set(&a.input.input, &a.input.labels)?;
    let index = Index::build(set, &config)?;
    persist::save_index(&index, &a.output)?;
    Ok(())
}

/// Query vectors only; query labels are not needed for search.
fn read_queries(path: &Path) -> Result<(usize, Vec<f32>), Error> {
    let bytes = std::fs::read(path)?;
    let (header, data) = io::decode_fvb_payload(&bytes)?;
    Ok((header.dim, data))
}

fn search(a: SearchArgs) -> CmdResult {
    let index = persist::load_index(&a.index)?;
    let (dim, data) = read_queries(&a.queries)?;
    if dim != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            found: dim,
        }
        .into());
    }
    let results = index.search(Rows::new(dim, &data)?, a.k, a.nprobe)?;
    let mut out = String::from("query_idx\trank\tid\tlabel\tdist\n");
    for (q, r) in results.iter().enumerate() {
        for (rank, n) in r.entries.iter().enumerate() {
            writeln!(
                out,
                "{q}\t{}\t{}\t{}\t{}",
                rank + 1,
                n.id,
                index.label(n.id),
                n.dist
            )
            .unwrap();
        }
    }
    emit(&out, a.output.as_deref())?;
    Ok(())
}

fn clean(a: CleanArgs) -> CmdResult {
    let set = read_set(&a.input.input, &a.input.labels)?;
    let (cleaned, reports) = gallery::clean_gallery(&set, a.seed)?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&r.to_json_line());
        lines.push('\n');
    }
    write_set(&cleaned, &a.output)?;
    io::write_atomic(&a.report, lines.as_bytes())?;
    Ok(())
}

fn fuse(a: FuseArgs) -> CmdResult {
    let first = read_set(&a.input.input, &a.input.labels)?;
    let normalize = !a.no_normalize;
    let fused = match &a.second {
        Some(p) => gallery::fuse_sets(
            &first,
            &read_set(p, &a.second_labels)?,
            a.strategy,
            normalize,
        )?,
        None => gallery::fuse_halves(&first, a.strategy, normalize)?,
    };
    write_set(&fused, &a.output)?;
    Ok(())
}

fn split(a: SplitArgs) -> CmdResult {
    let set = read_set(&a.input.input, &a.input.labels)?;
    let spec = SplitSpec::new(
        a.identities,
        a.in_gallery_fraction,
        a.probes_per_identity,
        a.seed,
    );
    let s = eval::make_split(&set, &spec)?;
    io::write_embeddings(&s.gallery, &a.gallery, &io::default_labels_path(&a.gallery))?;
    io::write_embeddings(&s.probes, &a.probes, &io::default_labels_path(&a.probes))?;
    Ok(())
}

fn write_reports(reports: &[eval::EvalReport], out: &ReportOutput) -> Result<(), Error> {
    if let Some(p) = &out.json {
        io::write_atomic(p, eval::reports_to_json(reports).as_bytes())?;
    }
    let tsv = eval::reports_to_tsv(reports);
    match (&out.tsv, &out.json) {
        (Some(p), _) => io::write_atomic(p, tsv.as_bytes()),
        (None, None) => emit(&tsv, None),
        (None, Some(_)) => Ok(()),
    }
}

fn options(out: &ReportOutput) -> BenchOptions {
    BenchOptions {
        threshold: out.threshold,
        repetitions: out.repetitions,
    }
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let index = persist::load_index(&a.index)?;
    let probes = read_set(&a.probes, &a.probe_labels)?;
    let truth = eval::truth_from_labels(index.labels(), &probes);
    let report = eval::evaluate(&index, &probes, &truth, a.nprobe, &options(&a.report))?;
    write_reports(&[report], &a.report)?;
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let gallery = read_set(&a.gallery, &a.gallery_labels)?;
    let probes = read_set(&a.probes, &a.probe_labels)?;
    let truth = eval::truth_from_labels(gallery.labels(), &probes);
    let configs: Vec<StrategyConfig> = eval::default_bench_matrix(&a.nlist, a.m, a.seed);
    let reports = eval::run_benchmark(&gallery, &probes, &truth, &configs, &options(&a.report))?;
    write_reports(&reports, &a.report)?;
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    let set = eval::synthetic_identities(&SynthSpec {
        identities: a.identities,
        per_identity: a.per_identity,
        dim: a.dim,
        sigma: a.sigma,
        seed: a.seed,
    })?;
    write_set(&set, &a.output)?;
    Ok(())
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Export(a) => export(a),
        Command::Build(a) => build(a),
        Command::Search(a) => search(a),
        Command::Clean(a) => clean(a),
        Command::Fuse(a) => fuse(a),
        Command::Split(a) => split(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Invariant(_)) {
                3
            } else {
                2
            })
        }
    }
}
