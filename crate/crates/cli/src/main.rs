mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jpvae::checkpoint::Checkpoint;
use jpvae::covparam::CrossCovKind;
use jpvae::data::{load_hvd_mnist, read_cache, write_cache, HvdMnist, Split, ViewPairDataset};
use jpvae::evaluation::{
    cross_correlation, evaluate_model, original_baselines, reconstruction_loss, EvalConfig, MetricsReport,
};
use jpvae::imputation::{fit_latent_mle, impute, LatentStats};
use jpvae::model::{train_with, JpvaeModel, TrainConfig, View};
use jpvae::plot::{accuracy_bar_list, accuracy_bars, corr_heatmap, digits_grid};
use jpvae::Tensor;

use config::{CellSet, RunConfig, SplitArg};

const TRAIN_CACHE: &str = "train.hvd";
const TEST_CACHE: &str = "test.hvd";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(jpvae::Error),
}

impl From<jpvae::Error> for CliError {
    fn from(e: jpvae::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 2 usage, 3 data or parse, 4 numeric.
    fn exit_code(&self) -> u8 {
        use jpvae::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Usage(_) | E::Config(_) | E::Precondition(_) => 2,
                E::Numeric(_) => 4,
                E::Dimension(_) | E::Parse { .. } | E::Checkpoint(_) | E::Version { .. } | E::Io(_) => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "jpvae", version, about = "Two-view VAE with a learnable joint Gaussian prior")]
struct Cli {
    /// TOML file supplying defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Directory with the MNIST IDX files [env: JPVAE_DATA_DIR]
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Directory produced by `ingest`, used instead of the IDX files.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<u8>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and binarize MNIST into packed two-view caches.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per (variant, seed).
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// zero, svd or orthogonal; repeat or separate with commas.
        #[arg(long = "variant", value_delimiter = ',', value_parser = parse_variant)]
        variants: Vec<CrossCovKind>,
        #[arg(long = "seed", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        ramp_fraction: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        sign_param: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long)]
        latent: Option<usize>,
    },
    /// Impute one view from the other with a trained checkpoint.
    Impute {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// The observed view (1 or 2); the other view is imputed.
        #[arg(long)]
        from: Option<u8>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Fit latent statistics on the training split when the checkpoint has none.
        #[arg(long)]
        fit_stats: bool,
        /// CSV of imputed pixel probabilities.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute losses, active units, correlations and classifier accuracies.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        cells: Option<CellSet>,
        /// Also train classifiers on the original views.
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        classifier_epochs: Option<usize>,
        #[arg(long)]
        classifier_original_epochs: Option<usize>,
    },
    /// Render a figure: digits-grid, corr-heatmap or accuracy-bars.
    Plot {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        per_row: Option<usize>,
        #[arg(long)]
        from: Option<u8>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<CrossCovKind>,
    },
}

fn parse_variant(s: &str) -> Result<CrossCovKind, String> {
    CrossCovKind::from_label(s).map_err(|e| e.to_string())
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn merge_data(cfg: &mut RunConfig, d: DataArgs) {
    if d.data_dir.is_some() {
        cfg.data.dir = d.data_dir;
    }
    if d.cache_dir.is_some() {
        cfg.data.cache_dir = d.cache_dir;
    }
    set(&mut cfg.data.threshold, d.threshold);
    if d.train_limit.is_some() {
        cfg.data.train_limit = d.train_limit;
    }
    if d.test_limit.is_some() {
        cfg.data.test_limit = d.test_limit;
    }
}

/// Folds the flags of `command` into `cfg`.
fn resolve(cfg: &mut RunConfig, command: Command) {
    match command {
        Command::Ingest { data, out } => {
            cfg.command = "ingest".into();
            merge_data(cfg, data);
            set(&mut cfg.out, out);
        }
        Command::Train {
            data,
            out,
            variants,
            seeds,
            epochs,
            batch_size,
            learning_rate,
            cycles,
            ramp_fraction,
            alpha,
            sign_param,
            hidden,
            latent,
        } => {
            cfg.command = "train".into();
            merge_data(cfg, data);
            set(&mut cfg.out, out);
            if !variants.is_empty() {
                cfg.variants = variants;
            }
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            let t = &mut cfg.train;
            set(&mut t.epochs, epochs);
            set(&mut t.batch_size, batch_size);
            set(&mut t.learning_rate, learning_rate);
            set(&mut t.cycles, cycles);
            set(&mut t.ramp_fraction, ramp_fraction);
            set(&mut t.alpha, alpha);
            set(&mut t.sign_param, sign_param);
            if !hidden.is_empty() {
                cfg.arch.hidden = hidden;
            }
            set(&mut cfg.arch.latent, latent);
        }
        Command::Impute {
            data,
            checkpoint,
            from,
            split,
            fit_stats,
            output,
        } => {
            cfg.command = "impute".into();
            merge_data(cfg, data);
            let i = &mut cfg.impute;
            if checkpoint.is_some() {
                i.checkpoint = checkpoint;
            }
            set(&mut i.from, from);
            set(&mut i.split, split);
            i.fit_stats |= fit_stats;
            if output.is_some() {
                i.output = output;
            }
        }
        Command::Eval {
            data,
            checkpoints,
            out,
            cells,
            baselines,
            classifier_epochs,
            classifier_original_epochs,
        } => {
            cfg.command = "eval".into();
            merge_data(cfg, data);
            set(&mut cfg.out, out);
            if !checkpoints.is_empty() {
                cfg.eval.checkpoints = checkpoints;
            }
            set(&mut cfg.eval.cells, cells);
            cfg.eval.baselines |= baselines;
            set(&mut cfg.classifier.epochs, classifier_epochs);
            set(&mut cfg.classifier.original_epochs, classifier_original_epochs);
        }
        Command::Plot {
            data,
            kind,
            report,
            checkpoint,
            output,
            count,
            per_row,
            from,
            variant,
        } => {
            cfg.command = "plot".into();
            merge_data(cfg, data);
            let p = &mut cfg.plot;
            if kind.is_some() {
                p.kind = kind;
            }
            if report.is_some() {
                p.report = report;
            }
            if checkpoint.is_some() {
                p.checkpoint = checkpoint;
            }
            if output.is_some() {
                p.output = output;
            }
            set(&mut p.count, count);
            set(&mut p.per_row, per_row);
            set(&mut p.from, from);
            if variant.is_some() {
                p.variant = variant;
            }
        }
    }
}

fn load_data(cfg: &RunConfig) -> CliResult<HvdMnist> {
    let d = &cfg.data;
    if let Some(dir) = &d.cache_dir {
        let limit = |ds: ViewPairDataset, n: Option<usize>| match n {
            Some(n) => ds.take(n),
            None => ds,
        };
        return Ok(HvdMnist {
            train: limit(read_cache(&dir.join(TRAIN_CACHE))?, d.train_limit),
            test: limit(read_cache(&dir.join(TEST_CACHE))?, d.test_limit),
        });
    }
    Ok(load_hvd_mnist(&d.resolved_dir(), d.threshold, d.train_limit, d.test_limit)?)
}

fn split_of(data: &HvdMnist, split: SplitArg) -> &ViewPairDataset {
    match split {
        SplitArg::Train => &data.train,
        SplitArg::Test => &data.test,
    }
}

fn view_arg(v: u8) -> CliResult<View> {
    match v {
        1 => Ok(View::One),
        2 => Ok(View::Two),
        other => Err(CliError::Usage(format!("view must be 1 or 2, got {other}"))),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(jpvae::Error::from)?;
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig) -> CliResult<()> {
    let data = load_data(cfg)?;
    std::fs::create_dir_all(&cfg.out).map_err(jpvae::Error::from)?;
    write_cache(&cfg.out.join(TRAIN_CACHE), &data.train)?;
    write_cache(&cfg.out.join(TEST_CACHE), &data.test)?;
    let summary = serde_json::json!({
        "threshold": cfg.data.threshold,
        "train": { "rows": data.train.len(), "hash": data.train.content_hash() },
        "test": { "rows": data.test.len(), "hash": data.test.content_hash() },
    });
    write_json(&cfg.out.join("ingest.json"), &summary)?;
    cfg.echo(&cfg.out)?;
    println!(
        "ingested {} train / {} test pairs into {}",
        data.train.len(),
        data.test.len(),
        cfg.out.display()
    );
    Ok(())
}

pub fn run_name(kind: CrossCovKind, seed: u64) -> String {
    format!("{}_seed{seed}", kind.label())
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(CliError::Usage("train needs at least one variant and one seed".into()));
    }
    // reject bad hyperparameters before touching the data
    for &variant in &cfg.variants {
        TrainConfig { variant, ..cfg.train.clone() }.validate()?;
    }
    cfg.arch.validate()?;
    let data = load_data(cfg)?;
    let hash = data.train.content_hash();
    std::fs::create_dir_all(&cfg.out).map_err(jpvae::Error::from)?;
    cfg.echo(&cfg.out)?;
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let tcfg = TrainConfig {
                variant,
                seed,
                ..cfg.train.clone()
            };
            let name = run_name(variant, seed);
            let ckpt_path = cfg.out.join(format!("{name}.ckpt"));
            let log_path = cfg.out.join(format!("{name}.log.csv"));
            let mut log = csv::Writer::from_path(&log_path).map_err(|e| CliError::Core(jpvae::Error::Io(e.into())))?;
            let csv_err = |e: csv::Error| CliError::Core(jpvae::Error::Io(e.into()));
            log.write_record(["epoch", "recon1", "recon2", "kl", "beta", "loss", "max_singular_value"])
                .map_err(csv_err)?;
            log.flush().map_err(jpvae::Error::from)?;
            eprintln!("training {name} on {} pairs", data.train.len());
            let outcome = train_with(&data.train, &tcfg, cfg.arch.clone(), |model, m| {
                let row = [m.recon1, m.recon2, m.kl, m.beta, m.loss, m.max_singular_value];
                let mut rec = vec![m.epoch.to_string()];
                rec.extend(row.iter().map(|v| format!("{v}")));
                log.write_record(&rec).map_err(|e| jpvae::Error::Io(e.into()))?;
                log.flush()?;
                Checkpoint::from_model(model, &tcfg, m.epoch, Some(hash.clone())).save(&ckpt_path)?;
                eprintln!(
                    "  epoch {}: recon {:.2}/{:.2} kl {:.2} beta {:.3} sigma1 {:.4}",
                    m.epoch, m.recon1, m.recon2, m.kl, m.beta, m.max_singular_value
                );
                Ok(())
            })?;
            let stats = fit_latent_mle(&outcome.model, &data.train)?;
            let mut ckpt = Checkpoint::from_model(&outcome.model, &tcfg, tcfg.epochs, Some(hash.clone()));
            ckpt.set_latent_stats(&stats);
            ckpt.save(&ckpt_path)?;
            println!("{}", ckpt_path.display());
        }
    }
    Ok(())
}

/// Model and latent statistics from a checkpoint, fitting the statistics on
/// the training split when allowed.
fn model_and_stats(path: &Path, data: Option<&HvdMnist>, fit: bool) -> CliResult<(Checkpoint, JpvaeModel, LatentStats)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    let stats = match ckpt.latent_stats()? {
        Some(s) if !fit => s,
        stored => match (fit, data) {
            (true, Some(d)) => fit_latent_mle(&model, &d.train)?,
            (true, None) => stored.ok_or_else(|| CliError::Usage("no data to fit latent statistics on".into()))?,
            (false, _) => {
                return Err(CliError::Usage(format!(
                    "{} has no latent statistics; pass --fit-stats to compute them",
                    path.display()
                )))
            }
        },
    };
    Ok((ckpt, model, stats))
}

fn cmd_impute(cfg: &RunConfig) -> CliResult<()> {
    let ic = &cfg.impute;
    let path = ic
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("impute needs --checkpoint".into()))?;
    let from = view_arg(ic.from)?;
    let output = ic
        .output
        .clone()
        .ok_or_else(|| CliError::Usage("impute needs --output".into()))?;
    // stats problems are usage errors and should not wait on data loading
    let ckpt = Checkpoint::load(path)?;
    if ckpt.latent_stats()?.is_none() && !ic.fit_stats {
        return Err(CliError::Usage(format!(
            "{} has no latent statistics; pass --fit-stats to compute them",
            path.display()
        )));
    }
    let data = load_data(cfg)?;
    let (_, model, stats) = model_and_stats(path, Some(&data), ic.fit_stats)?;
    let ds = split_of(&data, ic.split);
    let target = from.other();
    let probs = impute(&ds.view(from.number()).to_tensor(), &model, &stats, target)?;
    let truth = ds.view(target.number()).to_tensor();
    let bce = reconstruction_loss(&truth, &probs)?;

    if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(jpvae::Error::from)?;
    }
    write_probs(&output, &probs, &ds.labels)?;
    let summary = serde_json::json!({
        "checkpoint": path,
        "variant": model.variant().label(),
        "observed_view": from.number(),
        "imputed_view": target.number(),
        "split": match ds.split { Split::Train => "train", Split::Test => "test" },
        "rows": ds.len(),
        "mean_bce": bce,
    });
    write_json(&output.with_extension("json"), &summary)?;
    println!("imputed view {} from view {} on {} rows: mean BCE {bce:.4}", target.number(), from.number(), ds.len());
    Ok(())
}

fn write_probs(path: &Path, probs: &Tensor, labels: &[u8]) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::Core(jpvae::Error::Io(e.into()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..probs.cols()).map(|c| format!("p{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..probs.rows() {
        let mut rec = vec![labels[r].to_string()];
        rec.extend(probs.row_slice(r).iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(jpvae::Error::from)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    if cfg.eval.checkpoints.is_empty() {
        return Err(CliError::Usage("eval needs at least one --checkpoint".into()));
    }
    // fail on unreadable or incompatible checkpoints before loading data
    let ckpts = cfg
        .eval
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| (p, c)))
        .collect::<Result<Vec<_>, _>>()?;
    let data = load_data(cfg)?;
    let ecfg = EvalConfig {
        classifier: cfg.classifier.clone(),
        cells: cfg.eval.cells.cells(),
    };
    let mut runs = Vec::new();
    for (path, ckpt) in &ckpts {
        let model = ckpt.model()?;
        let stats = match ckpt.latent_stats()? {
            Some(s) => s,
            None => fit_latent_mle(&model, &data.train)?,
        };
        let seed = ckpt.meta.config.seed;
        eprintln!("evaluating {}", path.display());
        runs.push(evaluate_model(&model, &stats, seed, &data.train, &data.test, &ecfg)?);
    }
    let mut baselines = std::collections::BTreeMap::<String, Vec<f64>>::new();
    if cfg.eval.baselines {
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.sort();
        seeds.dedup();
        for seed in seeds {
            for (label, acc) in original_baselines(&data.train, &data.test, &cfg.classifier, seed)? {
                baselines.entry(label).or_default().push(acc);
            }
        }
    }
    let report = MetricsReport::aggregate(runs, baselines);
    std::fs::create_dir_all(&cfg.out).map_err(jpvae::Error::from)?;
    std::fs::write(cfg.out.join("report.json"), report.to_json()? + "\n").map_err(jpvae::Error::from)?;
    report.write_csv(&cfg.out.join("report.csv"))?;
    cfg.echo(&cfg.out)?;
    for s in &report.summary {
        let get = |k: &str| s.metrics.get(k).map_or(f64::NAN, |m| m.mean);
        println!(
            "{:<10} recon {:.2}/{:.2} impute {:.2}/{:.2} AU {:.1}% corr-norm {:.3}",
            s.variant.label(),
            get("recon.X~1"),
            get("recon.X~2"),
            get("impute.X~1|2"),
            get("impute.X~2|1"),
            get("active_units"),
            get("cross_corr_norm"),
        );
    }
    println!("report written to {}", cfg.out.join("report.json").display());
    Ok(())
}

const PLOT_KINDS: [&str; 3] = ["digits-grid", "corr-heatmap", "accuracy-bars"];

fn cmd_plot(cfg: &RunConfig) -> CliResult<()> {
    let pc = &cfg.plot;
    let kind = pc
        .kind
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("plot needs --kind, one of {}", PLOT_KINDS.join(", "))))?;
    if !PLOT_KINDS.contains(&kind) {
        return Err(CliError::Usage(format!(
            "unknown plot kind {kind:?}; expected one of {}",
            PLOT_KINDS.join(", ")
        )));
    }
    let output = pc
        .output
        .clone()
        .ok_or_else(|| CliError::Usage("plot needs --output".into()))?;
    let read_report = || -> CliResult<MetricsReport> {
        let p = pc
            .report
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("{kind} needs --report")))?;
        Ok(MetricsReport::from_json(&std::fs::read_to_string(p).map_err(jpvae::Error::from)?)?)
    };
    let mut text = vec![("kind", kind.to_string())];
    let raster = match kind {
        "digits-grid" => {
            let path = pc
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("digits-grid needs --checkpoint".into()))?;
            let from = view_arg(pc.from)?;
            let data = load_data(cfg)?;
            let (_, model, stats) = model_and_stats(path, Some(&data), false).or_else(|e| match e {
                CliError::Usage(_) => model_and_stats(path, Some(&data), true),
                other => Err(other),
            })?;
            let ds = data.test.take(pc.count.max(1));
            let observed = ds.view(from.number()).to_tensor();
            let imputed = impute(&observed, &model, &stats, from.other())?;
            let (top, bottom) = match from {
                View::One => (observed, imputed),
                View::Two => (imputed, observed),
            };
            text.push(("observed_view", from.number().to_string()));
            digits_grid(&top, &bottom, pc.per_row)?
        }
        "corr-heatmap" => {
            let (corr, norm) = if let Some(path) = &pc.checkpoint {
                let data = load_data(cfg)?;
                let model = Checkpoint::load(path)?.model()?;
                cross_correlation(&model, &data.test)?
            } else {
                let report = read_report()?;
                let run = report
                    .runs
                    .iter()
                    .find(|r| pc.variant.is_none_or(|v| v == r.variant))
                    .ok_or_else(|| CliError::Usage("report has no matching run".into()))?;
                (Tensor::from_rows(&run.cross_corr)?, run.cross_corr_norm)
            };
            text.push(("frobenius_norm", format!("{norm:.6}")));
            corr_heatmap(&corr, norm)
        }
        _ => {
            let bars = accuracy_bar_list(&read_report()?);
            text.push(("bars", bars.len().to_string()));
            accuracy_bars(&bars)?
        }
    };
    if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(jpvae::Error::from)?;
    }
    raster.save_png(&output, &text)?;
    println!("{} ({}x{})", output.display(), raster.width, raster.height);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    resolve(&mut cfg, cli.command);
    match cfg.command.as_str() {
        "ingest" => cmd_ingest(&cfg),
        "train" => cmd_train(&cfg),
        "impute" => cmd_impute(&cfg),
        "eval" => cmd_eval(&cfg),
        _ => cmd_plot(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jpvae: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
