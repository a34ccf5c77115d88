//! Command-line entry point: train, evaluate, sweep, plot, export, inspect.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fbcode::archive::{self, summarize};
use fbcode::channel::{derive_seed, rng_from_seed};
use fbcode::codec::{run_traces, MessageBatch, Noise, Snrs};
use fbcode::config::{reference_config, ExperimentConfig, Precision};
use fbcode::evaluation::{
    compare_modes, estimate_bler, is_monotone, point_seed, sweep, BlerPoint, EstimateOptions, Provenance, ResultFiles,
    ResultRow,
};
use fbcode::networks::{freeze_stats, Model, NormMode};
use fbcode::plot::{plot_bler, Series};
use fbcode::tensor::Scalar;
use fbcode::training::{train_loop, TrainOptions};
use fbcode::{Error, Result};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "FBCODE_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "fbcode", version, about = "Learned feedback codes over AWGN channels")]
struct Cli {
    /// Experiment configuration (TOML). Defaults to the reference setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set T=9` or `--set train.batch_size=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed; every other seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel evaluation shards.
    #[arg(long, global = true)]
    shards: Option<usize>,
    /// Output directory (default: $FBCODE_OUT_DIR, else `runs`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the three networks and write an archive plus metrics.
    Train(TrainArgs),
    /// Estimate BLER at one SNR pair.
    Evaluate(EvalArgs),
    /// Estimate BLER over a list of forward SNRs.
    Sweep(SweepArgs),
    /// Draw BLER curves from result files.
    Plot(PlotArgs),
    /// Dump per-message symbol traces.
    Export(ExportArgs),
    /// Describe an archive.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Progress line every N batches.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug, Clone)]
struct ArchiveArgs {
    /// Archive manifest written by `train`.
    #[arg(long)]
    archive: PathBuf,
    /// Freeze normalization statistics first if the archive has none.
    #[arg(long)]
    freeze: bool,
}

#[derive(Args, Debug, Clone)]
struct StopArgs {
    #[arg(long)]
    min_errors: Option<u64>,
    #[arg(long)]
    max_trials: Option<u64>,
    /// Messages per simulated batch.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    archive: ArchiveArgs,
    #[command(flatten)]
    stop: StopArgs,
    /// Forward SNR in dB (default: the archive's protocol value).
    #[arg(long, allow_hyphen_values = true)]
    snr_ff: Option<f64>,
    /// Feedback SNR in dB (default: the archive's protocol value).
    #[arg(long, allow_hyphen_values = true)]
    snr_fb: Option<f64>,
    /// Result file stem (writes `.csv` and `.jsonl`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    archive: ArchiveArgs,
    #[command(flatten)]
    stop: StopArgs,
    /// Comma-separated forward SNRs in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    snr_ff: Vec<f64>,
    #[arg(long, allow_hyphen_values = true)]
    snr_fb: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Second archive (baseline) to compare against point by point.
    #[arg(long)]
    compare: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Result files (CSV).
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Legend labels, one per file (default: file stems).
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Output SVG.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    archive: ArchiveArgs,
    /// Number of messages to trace.
    #[arg(long, default_value_t = 10)]
    messages: usize,
    #[arg(long, allow_hyphen_values = true)]
    snr_ff: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    snr_fb: Option<f64>,
    /// Output JSON-lines file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_config(cli: &Cli, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, base) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(base)) => base,
        (None, None) => reference_config(),
    };
    if !cli.overrides.is_empty() {
        cfg = cfg.with_overrides(&cli.overrides)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(shards) = cli.shards {
        cfg.eval.shards = shards;
    }
    cfg.validate().into_result()?;
    Ok(cfg)
}

fn announce(cli: &Cli, cfg: &ExperimentConfig) {
    if !cli.quiet {
        eprintln!("config hash {}", cfg.hash());
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Evaluate(a) => with_precision(cli, &a.archive.archive, |p| match p {
            Precision::F32 => cmd_evaluate::<f32>(cli, a),
            Precision::F64 => cmd_evaluate::<f64>(cli, a),
        }),
        Command::Sweep(a) => with_precision(cli, &a.archive.archive, |p| match p {
            Precision::F32 => cmd_sweep::<f32>(cli, a),
            Precision::F64 => cmd_sweep::<f64>(cli, a),
        }),
        Command::Plot(a) => cmd_plot(cli, a),
        Command::Export(a) => with_precision(cli, &a.archive.archive, |p| match p {
            Precision::F32 => cmd_export::<f32>(cli, a),
            Precision::F64 => cmd_export::<f64>(cli, a),
        }),
        Command::Inspect(a) => cmd_inspect(cli, a),
    }
}

fn with_precision(_cli: &Cli, archive: &Path, f: impl FnOnce(Precision) -> Result<()>) -> Result<()> {
    let file = archive::TensorFile::read(archive)?;
    f(file.manifest.config.train.precision)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let resume = match &a.resume {
        Some(p) if !p.exists() && out_dir(cli).join(p).exists() => Some(out_dir(cli).join(p)),
        other => other.clone(),
    };
    let base = match &resume {
        Some(dir) => Some(archive::TensorFile::read(&dir.join("model.wt"))?.manifest.config),
        None => None,
    };
    let cfg = resolve_config(cli, base)?;
    announce(cli, &cfg);
    let out = match (&cli.out_dir, &resume) {
        (None, Some(dir)) => dir.parent().map(Path::to_path_buf).unwrap_or_else(|| out_dir(cli)),
        _ => out_dir(cli),
    };
    let opts = TrainOptions {
        out_dir: out.clone(),
        resume,
        log_every: if cli.quiet { 0 } else { a.log_every },
        stop_after: None,
    };
    let (archive, metrics) = match cfg.train.precision {
        Precision::F32 => {
            let o = train_loop::<f32>(&cfg, &opts)?;
            (o.archive, o.metrics)
        }
        Precision::F64 => {
            let o = train_loop::<f64>(&cfg, &opts)?;
            (o.archive, o.metrics)
        }
    };
    if let Some(path) = archive {
        println!("archive {}", path.display());
    }
    println!("metrics {}", metrics.display());
    Ok(())
}

/// Loads an archive, freezing statistics on request.
fn load<S: Scalar>(cli: &Cli, a: &ArchiveArgs) -> Result<(Model<S>, String)> {
    if !a.archive.exists() {
        return Err(Error::io(&a.archive, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let (mut model, file) = archive::load_model::<S>(&a.archive)?;
    if let Some(shards) = cli.shards {
        model.config.eval.shards = shards;
    }
    if !model.is_frozen() {
        if !a.freeze {
            return Err(Error::InvalidArgument(format!(
                "{} has no frozen normalization statistics; pass --freeze to compute them",
                a.archive.display()
            )));
        }
        let seed = cli.seed.unwrap_or(model.config.train.seed);
        let batch = model.config.eval.calibration_batch;
        freeze_stats(&mut model, batch, &mut rng_from_seed(derive_seed(seed, "freeze")))?;
    }
    announce(cli, &model.config);
    Ok((model, file.hash().to_string()))
}

fn estimate_options(cli: &Cli, cfg: &ExperimentConfig, stop: &StopArgs) -> EstimateOptions {
    let mut o = EstimateOptions::from_config(&cfg.eval, cli.seed.unwrap_or(cfg.train.seed));
    if let Some(v) = stop.min_errors {
        o.min_errors = v;
    }
    if let Some(v) = stop.max_trials {
        o.max_trials = v;
    }
    if let Some(v) = stop.batch {
        o.messages_per_batch = v;
    }
    o
}

fn print_header() {
    println!(
        "{:>9} {:>9} {:>11} {:>8} {:>11} {:>23} {:>11} {:>7}",
        "snr_ff", "snr_fb", "trials", "errors", "bler", "ci95", "block_rate", "time_s"
    );
}

fn print_point(p: &BlerPoint, note: &str) {
    println!(
        "{:>9.3} {:>9.3} {:>11} {:>8} {:>11.4e} [{:>9.3e}, {:>9.3e}] {:>11.4e} {:>7.1}{}{}",
        p.snr_ff_db,
        p.snr_fb_db,
        p.trials,
        p.block_errors,
        p.bler,
        p.ci95_low,
        p.ci95_high,
        p.per_block_error_rate,
        p.wall_time,
        if p.cap_hit { "  cap hit" } else { "" },
        note
    );
}

fn results_stem(cli: &Cli, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| out_dir(cli).join("results"))
}

fn cmd_evaluate<S: Scalar>(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (model, archive_hash) = load::<S>(cli, &a.archive)?;
    let cfg = &model.config;
    let snrs = Snrs::new(
        a.snr_ff.unwrap_or(cfg.protocol.snr_ff_db),
        a.snr_fb.unwrap_or(cfg.protocol.snr_fb_db),
    );
    let mut opts = estimate_options(cli, cfg, &a.stop);
    opts.seed = point_seed(opts.seed, snrs);
    let point = estimate_bler(&model, snrs, &opts)?;
    print_header();
    print_point(&point, "");
    let files = ResultFiles::new(&results_stem(cli, &a.out));
    files.write(&[ResultRow::new(&cfg.hash(), &archive_hash, &point)])?;
    println!("results {}", files.csv.display());
    Ok(())
}

fn cmd_sweep<S: Scalar>(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let (model, archive_hash) = load::<S>(cli, &a.archive)?;
    let cfg = model.config.clone();
    let snr_fb = a.snr_fb.unwrap_or(cfg.protocol.snr_fb_db);
    let opts = estimate_options(cli, &cfg, &a.stop);
    if let Some(other) = &a.compare {
        let (baseline, _) = load::<S>(cli, &ArchiveArgs { archive: other.clone(), freeze: a.archive.freeze })?;
        let points: Vec<Snrs> = a.snr_ff.iter().map(|&ff| Snrs::new(ff, snr_fb)).collect();
        let rows = compare_modes(&model, &baseline, &points, &opts)?;
        println!(
            "{:>9} {:>9} {:>12} {:>12} {:>9} {:>12}",
            "snr_ff", "snr_fb", format!("bler_{}", cfg.protocol.feedback_mode), format!("bler_{}", baseline.config.protocol.feedback_mode), "ratio", "improvement"
        );
        for r in &rows {
            println!(
                "{:>9.3} {:>9.3} {:>12.4e} {:>12.4e} {:>9.4} {:>12.4}",
                r.snr_ff_db, r.snr_fb_db, r.bler_active, r.bler_passive, r.ratio, r.improvement
            );
        }
        let path = results_stem(cli, &a.out).with_extension("comparison.csv");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| Error::io(&path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        println!("comparison {}", path.display());
        return Ok(());
    }
    let files = ResultFiles::new(&results_stem(cli, &a.out));
    let provenance = Provenance { config_hash: cfg.hash(), archive_hash };
    print_header();
    let points = sweep(&model, &a.snr_ff, snr_fb, &opts, &provenance, Some(&files), |p, reused| {
        print_point(p, if reused { "  (cached)" } else { "" });
        let _ = std::io::stdout().flush();
    })?;
    if !is_monotone(&points) {
        eprintln!("warning: BLER is not monotone in forward SNR");
    }
    println!("results {}", files.csv.display());
    Ok(())
}

fn cmd_plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    let mut series = Vec::new();
    for (i, path) in a.results.iter().enumerate() {
        let rows = fbcode::evaluation::read_results(path)?;
        let label = a
            .labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        series.push(Series { label, rows });
    }
    let out = a.out.clone().unwrap_or_else(|| out_dir(cli).join("bler.svg"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    plot_bler(&series, &out)?;
    println!("figure {}", out.display());
    Ok(())
}

fn cmd_export<S: Scalar>(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let (model, _) = load::<S>(cli, &a.archive)?;
    let cfg = &model.config;
    let snrs = Snrs::new(
        a.snr_ff.unwrap_or(cfg.protocol.snr_ff_db),
        a.snr_fb.unwrap_or(cfg.protocol.snr_fb_db),
    );
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    let mut rng = rng_from_seed(derive_seed(seed, "export"));
    let messages = MessageBatch::random(a.messages, cfg.protocol.message_bits, &mut rng);
    let noise = Noise::sample(&cfg.protocol.layout(), a.messages, &mut rng);
    let traces = run_traces(&model, &messages, snrs, &noise, NormMode::Frozen)?;
    let out = a.out.clone().unwrap_or_else(|| out_dir(cli).join("traces.jsonl"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for t in &traces {
        text.push_str(&serde_json::to_string(t).expect("plain record"));
        text.push('\n');
    }
    std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    println!("traces {}", out.display());
    Ok(())
}

fn cmd_inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let s = summarize(&a.archive)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s).expect("plain record"));
        return Ok(());
    }
    if !cli.quiet {
        eprintln!("config hash {}", s.config_hash);
    }
    println!("format      {}", s.format_version);
    println!("archive     {}", s.archive_hash);
    println!("config      {}", s.config_hash);
    println!("parameters  {}", s.total_parameters);
    println!();
    println!("{:<10} {:>7} {:>11}", "network", "layers", "parameters");
    for n in &s.networks {
        println!("{:<10} {:>7} {:>11}", n.name, n.layers, n.parameters);
    }
    println!();
    for st in &s.stats {
        println!(
            "{} stats {:?} frozen={} mean|mu|={:.4} std in [{:.4}, {:.4}]",
            st.network, st.shape, st.frozen, st.mean_abs_mean, st.min_std, st.max_std
        );
    }
    println!();
    for t in &s.tensors {
        println!("{:<48} {:>4} x {:<4} {}", t.name, t.shape[0], t.shape[1], t.dtype);
    }
    println!();
    print!("{}", s.config.to_toml());
    Ok(())
}
