//! Batch entry points for the box-prompt training toolkit.
//!
//! Subcommands cover the full pipeline: `preprocess` builds datasets,
//! `precompute` fills the embedding cache, `train` fits a prompt generator
//! (single run or trial grid), `eval` scores a checkpoint, `ablate-noise`
//! sweeps box-annotation noise bands, and `report` turns logs and metric
//! tables into summary tables and plots.
//!
//! Exit codes: 0 success, 1 operational error (IO, data, numerics),
//! 2 usage error (bad flags, unknown names). Every command is deterministic
//! given `--seed`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use boxprompt::backbone::{
    precompute_embeddings, Backbone, FileBackbone, ToyBackbone, ToyBackboneConfig,
};
use boxprompt::datapipe::{
    assign_splits, dataset_entries, entries_fingerprint, export_dataset, generate_synthetic,
    load_split, manifest_fingerprint, samples_from_volume, Split, SyntheticSpec, Volume,
};
use boxprompt::domain::{Sample, TrainConfig};
use boxprompt::experiment::{
    apply_ablation, run_noise_ablation, AblationMode, NoiseBand, NOISE_BANDS,
};
use boxprompt::generator::Generator;
use boxprompt::metrics::aggregate;
use boxprompt::presets::{preset, read_config_toml, write_config_toml};
use boxprompt::report::{
    metric_table_csv, noise_table_csv, plot_aggregates_png, plot_loss_curves_png,
    save_overlay_png, symmetric_difference, trial_table_csv, write_training_log,
};
use boxprompt::trainer::{
    evaluate, generator_config_for, predict, run_trials, train, validation_gate,
    EmbeddingSource, EvalOptions,
};

/// Environment variable naming the default embedding-cache directory;
/// `--cache` wins over it.
const CACHE_ENV: &str = "BOXPROMPT_CACHE_ROOT";

#[derive(Parser)]
#[command(
    name = "boxprompt",
    about = "Train box-prompt generators for promptable segmentation backbones",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a dataset directory (synthetic scenes or a volume pair).
    Preprocess(PreprocessArgs),
    /// Fill the embedding cache for every sample in a manifest.
    Precompute(PrecomputeArgs),
    /// Fit a prompt generator: single run or a subset-seed trial grid.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and score across box-annotation noise bands.
    AblateNoise(AblateNoiseArgs),
    /// Render tables and plots from logs and metric reports.
    Report(ReportArgs),
}

/// A failed command, split by exit code.
enum Failure {
    /// Bad invocation (exit 2).
    Usage(String),
    /// The command itself failed (exit 1).
    Run(String),
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl From<boxprompt::error::Error> for Failure {
    fn from(e: boxprompt::error::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Preprocess(a) => cmd_preprocess(a),
        Cmd::Precompute(a) => cmd_precompute(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::AblateNoise(a) => cmd_ablate_noise(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared argument groups and parsers

#[derive(Args)]
struct BackboneArg {
    /// Backbone: "toy" or "file:<dir>" (a directory of exported embeddings).
    #[arg(long, default_value = "toy")]
    backbone: String,
}

impl BackboneArg {
    fn open(&self) -> Result<Box<dyn Backbone>, Failure> {
        if self.backbone == "toy" {
            return Ok(Box::new(ToyBackbone::new(ToyBackboneConfig::default())?));
        }
        if let Some(dir) = self.backbone.strip_prefix("file:") {
            return Ok(Box::new(FileBackbone::open(Path::new(dir))?));
        }
        Err(usage(format!(
            "unknown backbone '{}' (use \"toy\" or \"file:<dir>\")",
            self.backbone
        )))
    }
}

#[derive(Args)]
struct CacheArg {
    /// Embedding cache directory; overrides the BOXPROMPT_CACHE_ROOT
    /// environment variable. Without either, embeddings are recomputed.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl CacheArg {
    fn dir(&self) -> Option<PathBuf> {
        self.cache
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }

    fn source(&self) -> EmbeddingSource {
        match self.dir() {
            Some(dir) => EmbeddingSource::CacheDir(dir),
            None => EmbeddingSource::Fresh,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in recipe name (see `--preset help` for the list).
    #[arg(long)]
    preset: Option<String>,
    /// TOML config file; wins over --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every random choice derives from it.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = if let Some(path) = &self.config {
            read_config_toml(path)?
        } else {
            let name = self.preset.as_deref().unwrap_or("paper-20shot");
            preset(name).map_err(|e| usage(e.to_string()))?
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn parse_size(s: &str, what: &str) -> Result<(usize, usize), Failure> {
    let parts: Vec<&str> = s.split('x').collect();
    let parse = |t: &str| t.trim().parse::<usize>().ok().filter(|&v| v > 0);
    if let [h, w] = parts[..] {
        if let (Some(h), Some(w)) = (parse(h), parse(w)) {
            return Ok((h, w));
        }
    }
    Err(usage(format!("{what} must look like 64x64, got '{s}'")))
}

fn parse_split(s: &str) -> Result<Option<Split>, Failure> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(usage(format!("unknown split '{other}' (train, val, test, all)"))),
    }
}

fn parse_trials(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("--trials must look like 3x3 (subsets x seeds), got '{s}'"));
    let parts: Vec<&str> = s.split('x').collect();
    if let [a, b] = parts[..] {
        let a = a.trim().parse::<usize>().map_err(|_| bad())?;
        let b = b.trim().parse::<usize>().map_err(|_| bad())?;
        if a >= 1 && b >= 1 {
            return Ok((a, b));
        }
    }
    Err(bad())
}

/// Band upper edges in percent ("0,1.5,3,5") to [`NoiseBand`]s.
fn parse_bands(s: &str) -> Result<Vec<NoiseBand>, Failure> {
    let edges: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--bands must be comma-separated percentages, got '{s}'")))?;
    if edges.first() != Some(&0.0) {
        return Err(usage("--bands must start at 0".to_string()));
    }
    if edges.windows(2).any(|p| p[1] <= p[0]) || edges.iter().any(|&e| e < 0.0 || e > 100.0) {
        return Err(usage(format!(
            "--bands must be strictly increasing percentages in [0, 100], got '{s}'"
        )));
    }
    let mut bands = vec![NoiseBand { lo: 0.0, hi: 0.0 }];
    for pair in edges.windows(2) {
        bands.push(NoiseBand { lo: pair[0] / 100.0, hi: pair[1] / 100.0 });
    }
    Ok(bands)
}

fn seed_grid(seed: u64, n_subsets: usize, n_seeds: usize) -> (Vec<u64>, Vec<u64>) {
    let subset_seeds = (0..n_subsets as u64).map(|i| seed.wrapping_add(i)).collect();
    let train_seeds = (0..n_seeds as u64).map(|j| seed.wrapping_add(1000 + j)).collect();
    (subset_seeds, train_seeds)
}

// ---------------------------------------------------------------------------
// preprocess

#[derive(Args)]
struct PreprocessArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Generate synthetic ellipse scenes.
    #[arg(long)]
    synthetic: bool,
    /// Number of synthetic scenes.
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene extent (HxW).
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Peak-to-peak synthetic pixel noise.
    #[arg(long, default_value_t = 8.0)]
    noise: f64,
    /// Fraction of samples assigned to the training split.
    #[arg(long, default_value_t = 0.6)]
    train_frac: f64,
    /// Fraction assigned to validation (the rest is test).
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    /// Intensity volume to slice instead of synthesizing.
    #[arg(long, requires = "labels")]
    scan: Option<PathBuf>,
    /// Binary label volume matching --scan.
    #[arg(long, requires = "scan")]
    labels: Option<PathBuf>,
    /// Sample-id prefix for volume slices.
    #[arg(long, default_value = "vol")]
    prefix: String,
    /// Target extent (HxW) after 1 mm resampling and crop/pad.
    #[arg(long, default_value = "64x64")]
    target: String,
}

fn cmd_preprocess(a: PreprocessArgs) -> CmdResult {
    for (name, v) in [("--train-frac", a.train_frac), ("--val-frac", a.val_frac)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(usage(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if a.train_frac + a.val_frac > 1.0 {
        return Err(usage("--train-frac + --val-frac must not exceed 1".to_string()));
    }
    let samples: Vec<Sample> = if a.synthetic {
        let size = parse_size(&a.size, "--size")?;
        generate_synthetic(&SyntheticSpec { count: a.n, size, seed: a.seed, noise: a.noise })?
    } else if let (Some(scan), Some(labels)) = (&a.scan, &a.labels) {
        let target = parse_size(&a.target, "--target")?;
        let scan = Volume::read(scan)?;
        let labels = Volume::read(labels)?;
        samples_from_volume(&a.prefix, &scan, &labels, target)?
    } else {
        return Err(usage("choose an input: --synthetic, or --scan with --labels".to_string()));
    };
    let splits = assign_splits(samples.len(), a.train_frac, a.val_frac, a.seed);
    let items: Vec<(Sample, Split)> = samples.into_iter().zip(splits).collect();

    let fingerprint = entries_fingerprint(&dataset_entries(&items))?;
    let manifest = a.out.join("manifest.jsonl");
    if manifest.is_file() && manifest_fingerprint(&manifest)? == fingerprint {
        println!("manifest unchanged ({} samples, fingerprint {fingerprint})", items.len());
        return Ok(());
    }
    export_dataset(&a.out, &items)?;
    println!(
        "wrote {} samples to {} (fingerprint {fingerprint})",
        items.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// precompute

#[derive(Args)]
struct PrecomputeArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    backbone: BackboneArg,
    #[command(flatten)]
    cache: CacheArg,
}

fn cmd_precompute(a: PrecomputeArgs) -> CmdResult {
    let Some(cache_dir) = a.cache.dir() else {
        return Err(usage(format!("no cache directory: pass --cache or set {CACHE_ENV}")));
    };
    let backbone = a.backbone.open()?;
    let samples = load_split(&a.manifest, None)?;
    let report = precompute_embeddings(
        backbone.as_ref(),
        samples.iter().map(|s| (s.id.as_str(), &s.image)),
        &cache_dir,
    )?;
    println!(
        "computed {}, reused {}, payload {} bytes",
        report.computed, report.reused, report.total_payload_bytes
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (checkpoint, log, gate verdict, resolved config).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Loss ablation: full, pseudo-only, or no-consistency.
    #[arg(long)]
    ablate: Option<String>,
    /// Run a trial grid ("3x3" = subset seeds x train seeds) instead of a
    /// single fit; writes trials.csv.
    #[arg(long)]
    trials: Option<String>,
    #[command(flatten)]
    backbone: BackboneArg,
    #[command(flatten)]
    cache: CacheArg,
}

fn parse_ablation(s: &str) -> Result<AblationMode, Failure> {
    match s {
        "full" => Ok(AblationMode::Full),
        "pseudo-only" => Ok(AblationMode::PseudoOnly),
        "no-consistency" => Ok(AblationMode::NoConsistency),
        other => Err(usage(format!(
            "unknown ablation '{other}' (full, pseudo-only, no-consistency)"
        ))),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = a.config.resolve()?;
    if let Some(mode) = &a.ablate {
        cfg = apply_ablation(&cfg, parse_ablation(mode)?);
    }
    let backbone = a.backbone.open()?;
    let source = a.cache.source();
    let train_samples = load_split(&a.manifest, Some(Split::Train))?;
    let val_samples = load_split(&a.manifest, Some(Split::Val))?;
    std::fs::create_dir_all(&a.out)?;
    write_config_toml(&a.out.join("config.toml"), &cfg)?;

    if let Some(spec) = &a.trials {
        let (n_subsets, n_seeds) = parse_trials(spec)?;
        let test_samples = load_split(&a.manifest, Some(Split::Test))?;
        let (subset_seeds, train_seeds) = seed_grid(cfg.seed, n_subsets, n_seeds);
        let report = run_trials(
            backbone.as_ref(),
            &train_samples,
            &test_samples,
            &cfg,
            &subset_seeds,
            &train_seeds,
            &source,
        )?;
        let table_path = a.out.join("trials.csv");
        std::fs::write(&table_path, trial_table_csv(&report))?;
        println!(
            "{} trials: test DSC {:.2} ± {:.2}, ASSD {:.3} ± {:.3} ({})",
            report.trials.len(),
            report.dsc.mean,
            report.dsc.std,
            report.assd.mean,
            report.assd.std,
            table_path.display()
        );
        return Ok(());
    }

    let outcome = train(backbone.as_ref(), &train_samples, &val_samples, &cfg, &source)?;
    let checkpoint = a.out.join("generator.weights");
    outcome.generator.save_weights(&checkpoint)?;
    write_training_log(&a.out.join("train_log.jsonl"), &outcome.log)?;
    let gate = validation_gate(backbone.as_ref(), &outcome.generator, &train_samples, &source)?;
    std::fs::write(&a.out.join("gate.json"), serde_json::to_string_pretty(&gate).unwrap())?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs (final loss {:.4}); checkpoint {}",
        outcome.log.len(),
        last.loss.total,
        checkpoint.display()
    );
    println!(
        "validation gate: mean box-fill ratio {:.3} (threshold {:.1}) -> {}",
        gate.mean_ratio,
        gate.threshold,
        if gate.pass { "pass" } else { "FAIL" }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    /// Generator checkpoint from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Split to score: train, val, test, or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory (metrics.csv, optional overlays/).
    #[arg(long)]
    out: PathBuf,
    /// Metrics to include, comma-separated: dsc, assd.
    #[arg(long, default_value = "dsc,assd")]
    metric: String,
    /// Also write prediction-overlay PNGs under overlays/.
    #[arg(long)]
    overlays: bool,
    #[command(flatten)]
    backbone: BackboneArg,
    #[command(flatten)]
    cache: CacheArg,
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (mut with_dsc, mut with_assd) = (false, false);
    for m in a.metric.split(',') {
        match m.trim() {
            "dsc" => with_dsc = true,
            "assd" => with_assd = true,
            other => return Err(usage(format!("unknown metric '{other}' (dsc, assd)"))),
        }
    }
    let backbone = a.backbone.open()?;
    let generator =
        Generator::load_weights(generator_config_for(backbone.descriptor()), &a.checkpoint)?;
    let samples = load_split(&a.manifest, parse_split(&a.split)?)?;
    let opts = EvalOptions::default();
    let summary = evaluate(backbone.as_ref(), &generator, &samples, &a.cache.source(), &opts)?;

    std::fs::create_dir_all(&a.out)?;
    let table_path = a.out.join("metrics.csv");
    std::fs::write(&table_path, metric_table_csv(&summary, with_dsc, with_assd)?)?;
    if a.overlays {
        let dir = a.out.join("overlays");
        std::fs::create_dir_all(&dir)?;
        for s in &samples {
            let p = predict(backbone.as_ref(), &generator, &s.image)?;
            let mask = boxprompt::geometry::largest_component_filter(
                &p.threshold(opts.threshold),
                opts.min_component,
            );
            save_overlay_png(&dir.join(format!("{}.png", s.id)), &s.image, &mask)?;
        }
    }
    println!(
        "{} samples: DSC {:.2} ± {:.2}, ASSD {:.3} ± {:.3} ({})",
        summary.per_sample.len(),
        summary.dsc.mean,
        summary.dsc.std,
        summary.assd.mean,
        summary.assd.std,
        table_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate-noise

#[derive(Args)]
struct AblateNoiseArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (noise.csv, noise_dsc.png).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Train one model per band (the only supported mode; sweeps are always
    /// trained fresh so bands stay comparable).
    #[arg(long)]
    train_each: bool,
    /// Band upper edges in percent, ascending from 0 (default "0,1.5,3,5").
    #[arg(long)]
    bands: Option<String>,
    /// Trial grid per band ("subsets x seeds").
    #[arg(long, default_value = "1x1")]
    trials: String,
    #[command(flatten)]
    backbone: BackboneArg,
    #[command(flatten)]
    cache: CacheArg,
}

fn cmd_ablate_noise(a: AblateNoiseArgs) -> CmdResult {
    if !a.train_each {
        return Err(usage(
            "pass --train-each: the sweep trains one model per noise band".to_string(),
        ));
    }
    let bands = match &a.bands {
        Some(spec) => parse_bands(spec)?,
        None => NOISE_BANDS.to_vec(),
    };
    let cfg = a.config.resolve()?;
    let backbone = a.backbone.open()?;
    let source = a.cache.source();
    let pool = load_split(&a.manifest, Some(Split::Train))?;
    let test = load_split(&a.manifest, Some(Split::Test))?;
    let (n_subsets, n_seeds) = parse_trials(&a.trials)?;
    let (subset_seeds, train_seeds) = seed_grid(cfg.seed, n_subsets, n_seeds);

    let results = run_noise_ablation(
        backbone.as_ref(),
        &pool,
        &test,
        &cfg,
        &bands,
        &subset_seeds,
        &train_seeds,
        cfg.seed,
        &source,
    )?;

    std::fs::create_dir_all(&a.out)?;
    let table_path = a.out.join("noise.csv");
    std::fs::write(&table_path, noise_table_csv(&results))?;
    let points: Vec<(f64, boxprompt::metrics::Aggregate)> =
        results.iter().map(|r| (r.band.hi * 100.0, r.report.dsc)).collect();
    plot_aggregates_png(&a.out.join("noise_dsc.png"), &points)?;
    for r in &results {
        println!(
            "band {:>12}: DSC {:.2} ± {:.2}",
            r.band.label(),
            r.report.dsc.mean,
            r.report.dsc.std
        );
    }
    println!("table {}", table_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Args)]
struct ReportArgs {
    /// Training log files (train_log.jsonl) to plot as loss curves.
    #[arg(long = "log")]
    logs: Vec<PathBuf>,
    /// Per-sample metric tables (metrics.csv) to compare.
    #[arg(long = "table")]
    tables: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// A metric table read back: ids plus the dsc and (optional) assd columns.
struct ParsedTable {
    label: String,
    ids: Vec<String>,
    dsc: Vec<f64>,
    assd: Option<Vec<f64>>,
}

fn parse_metric_table(path: &Path) -> Result<ParsedTable, Failure> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Failure::Run(format!("{}: empty table", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let (Some(id_col), Some(dsc_col)) = (find("sample_id"), find("dsc")) else {
        return Err(Failure::Run(format!(
            "{}: not a metric table (needs sample_id and dsc columns)",
            path.display()
        )));
    };
    let assd_col = find("assd");
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut parsed =
        ParsedTable { label, ids: Vec::new(), dsc: Vec::new(), assd: assd_col.map(|_| Vec::new()) };
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let id = fields[id_col];
        if id == "mean" || id == "std" {
            continue; // aggregate footer; recomputed from the sample rows
        }
        let cell = |i: usize| -> Result<f64, Failure> {
            fields
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Failure::Run(format!("{}: bad row '{line}'", path.display())))
        };
        parsed.ids.push(id.to_string());
        parsed.dsc.push(cell(dsc_col)?);
        if let (Some(list), Some(i)) = (parsed.assd.as_mut(), assd_col) {
            list.push(cell(i)?);
        }
    }
    Ok(parsed)
}

fn cmd_report(a: ReportArgs) -> CmdResult {
    if a.logs.is_empty() && a.tables.is_empty() {
        return Err(usage("nothing to report: pass --log and/or --table".to_string()));
    }
    std::fs::create_dir_all(&a.out)?;

    for log_path in &a.logs {
        let log = boxprompt::report::read_training_log(log_path)?;
        let stem = log_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "log".to_string());
        let out = a.out.join(format!("loss_{stem}.png"));
        plot_loss_curves_png(&out, &log)?;
        println!("loss curves {}", out.display());
    }

    if !a.tables.is_empty() {
        let parsed: Vec<ParsedTable> =
            a.tables.iter().map(|p| parse_metric_table(p)).collect::<Result<_, _>>()?;
        for other in &parsed[1..] {
            let diff = symmetric_difference(&parsed[0].ids, &other.ids);
            if !diff.is_empty() {
                eprintln!(
                    "warning: '{}' and '{}' cover different samples: {}",
                    parsed[0].label,
                    other.label,
                    diff.join(", ")
                );
            }
        }
        let std_mode = boxprompt::metrics::StdMode::Sample;
        let mut table = String::from("run,samples,dsc_mean,dsc_std,assd_mean,assd_std\n");
        let mut points = Vec::new();
        for (i, t) in parsed.iter().enumerate() {
            let dsc = aggregate(&t.dsc, std_mode)?;
            let assd = t.assd.as_deref().map(|v| aggregate(v, std_mode)).transpose()?;
            table.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                t.label,
                t.ids.len(),
                dsc.mean,
                dsc.std,
                assd.map(|x| format!("{:.6}", x.mean)).unwrap_or_default(),
                assd.map(|x| format!("{:.6}", x.std)).unwrap_or_default(),
            ));
            points.push(((i + 1) as f64, dsc));
        }
        let table_path = a.out.join("comparison.csv");
        std::fs::write(&table_path, table)?;
        plot_aggregates_png(&a.out.join("comparison_dsc.png"), &points)?;
        println!("comparison {}", table_path.display());
    }
    Ok(())
}
