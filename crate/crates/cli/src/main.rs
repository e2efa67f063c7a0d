use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use hagcn::checkpoint::Checkpoint;
use hagcn::config::RunConfig;
use hagcn::data::Split;
use hagcn::export::{export_adjacency, export_attention, line_plot_svg, write_svg, Line};
use hagcn::pipeline::{prepare, Prepared};
use hagcn::synth::{generate, write_bundle};
use hagcn::train::{
    evaluate, fit_and_evaluate, predict_split, repeat_seed, run_ablation_suite, run_robustness, write_history,
    write_report, write_table, MetricsReport, RunResult, TableRow, TrainSettings, ROBUSTNESS_VARIANCES,
};

#[derive(Parser, Debug)]
#[command(name = "hagcn", version, about = "Spatiotemporal traffic forecasting with learned heterogeneous graphs")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "hagcn-out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Independent seeded repeats for train, ablate and robustness.
    #[arg(long, global = true, value_name = "INT", default_value_t = 1)]
    repeats: usize,
    /// Extra configuration assignments, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, interpolate, window and split the configured data; write a manifest.
    Prepare,
    /// Generate a synthetic dataset with planted per-channel graphs.
    Synth,
    /// Train a model and write its checkpoint, history and metrics.
    Train,
    /// Evaluate a checkpoint on the validation and test splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the full model and its five ablations.
    Ablate,
    /// Train under Gaussian noise of increasing variance.
    Robustness {
        #[arg(long, value_delimiter = ',', default_values_t = ROBUSTNESS_VARIANCES.to_vec())]
        variances: Vec<f64>,
    },
    /// Write learned adjacency matrices as CSV.
    ExportAdjacency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Periodic slots of the dynamic graph to export.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        slots: Vec<usize>,
    },
    /// Write channel attention weights for one slot as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        slot: usize,
    },
    /// Plot predictions against ground truth as SVG.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        node: usize,
        /// Forecast step, 1-based.
        #[arg(long, default_value_t = 12)]
        horizon: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Number of consecutive samples to draw.
        #[arg(long, default_value_t = 288)]
        steps: usize,
        /// Training history CSV to plot as well.
        #[arg(long)]
        history: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging(&cli.out) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn init_logging(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let log_path = out.join("hagcn.log");
    let file = fern::log_file(&log_path).with_context(|| format!("cannot open {}", log_path.display()))?;
    fern::Dispatch::new()
        .level(log::LevelFilter::Info)
        .chain(
            fern::Dispatch::new()
                .format(|out, msg, record| out.finish(format_args!("{}: {msg}", record.level().as_str().to_lowercase())))
                .chain(std::io::stderr()),
        )
        .chain(
            fern::Dispatch::new()
                .format(|out, msg, record| out.finish(format_args!("[{} {}] {msg}", record.level(), record.target())))
                .chain(file),
        )
        .apply()?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, cli)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) -> Result<()> {
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    ensure!(cli.repeats >= 1, "--repeats must be at least 1");
    let out = cli.out.clone();
    match &cli.command {
        Command::Prepare => {
            let cfg = load_config(&cli)?;
            let prepared = prepare(&cfg)?;
            prepared.write_manifest(out.join("manifest.txt"))?;
            cfg.save(out.join("config.txt"))?;
            info!("{} samples prepared, manifest in {}", prepared.experiment.dataset.len(), out.display());
        }
        Command::Synth => synth(&load_config(&cli)?, &out)?,
        Command::Train => train(&load_config(&cli)?, &out, cli.repeats)?,
        Command::Eval { checkpoint } => {
            let (ck, cfg, prepared) = load_checkpoint_and_data(&cli, checkpoint)?;
            for (split, file) in [(Split::Val, "metrics_val.csv"), (Split::Test, "metrics_test.csv")] {
                let report = evaluate(
                    &ck.params,
                    &ck.config.model,
                    &prepared.experiment.dataset,
                    split,
                    &ck.normalizer,
                    cfg.data.mape_floor,
                )?;
                write_report(&report, out.join(file))?;
                info!("{split}: {}", report.aggregate_line());
            }
        }
        Command::Ablate => {
            let cfg = load_config(&cli)?;
            let prepared = prepare(&cfg)?;
            let rows = run_ablation_suite(&cfg.model, &cfg.train, &prepared.experiment, cli.repeats)?;
            write_table(&rows, "variant", out.join("ablation.csv"))?;
            cfg.save(out.join("config.txt"))?;
            log_rows(&rows);
        }
        Command::Robustness { variances } => {
            let cfg = load_config(&cli)?;
            ensure!(variances.iter().all(|v| *v >= 0.0), "noise variances must be non-negative");
            let prepared = prepare(&cfg)?;
            let rows = run_robustness(&cfg.model, &cfg.train, &prepared.experiment, variances, cli.repeats)?;
            write_table(&rows, "noise", out.join("robustness.csv"))?;
            cfg.save(out.join("config.txt"))?;
            log_rows(&rows);
        }
        Command::ExportAdjacency { checkpoint, slots } => {
            let ck = Checkpoint::load(checkpoint)?;
            let written = export_adjacency(&ck.params, &ck.config.model, &ck.node_ids, slots, &out)?;
            info!("wrote {} adjacency files to {}", written.len(), out.display());
        }
        Command::ExportAttention { checkpoint, slot } => {
            let ck = Checkpoint::load(checkpoint)?;
            let path = out.join(format!("attention_s{slot}.csv"));
            let rows = export_attention(&ck.params, &ck.config.model, *slot, &path)?;
            info!("wrote {rows} attention rows to {}", path.display());
        }
        Command::Plot { checkpoint, node, horizon, split, steps, history } => {
            let (ck, _, prepared) = load_checkpoint_and_data(&cli, checkpoint)?;
            plot(&ck, &prepared, *node, *horizon, (*split).into(), *steps, &out)?;
            if let Some(h) = history {
                plot_history(h, &out.join("history.svg"))?;
            }
        }
    }
    Ok(())
}

trait AggregateLine {
    fn aggregate_line(&self) -> String;
}

impl AggregateLine for MetricsReport {
    fn aggregate_line(&self) -> String {
        let a = &self.aggregate;
        format!("MAE {:.4}  MAPE {}  RMSE {:.4}", a.mae, a.mape_cell(), a.rmse)
    }
}

fn log_rows(rows: &[TableRow]) {
    for row in rows {
        info!("{:<30} mean test MAE {:.4} over {} run(s)", row.label, row.mean_test_mae(), row.runs.len());
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.synth_spec();
    let bundle = generate(&spec)?;
    write_bundle(&bundle, out)?;
    let dir = fs::canonicalize(out).with_context(|| format!("resolving {}", out.display()))?;
    let mut generated = cfg.clone();
    generated.data.series = vec![dir.join("series.csv")];
    generated.data.distances = Some(dir.join("distances.csv"));
    generated.data.interval_seconds = spec.interval_seconds;
    generated.model.num_slots = spec.num_slots;
    generated.model.features = bundle.series.num_features();
    generated.validate()?;
    generated.save(out.join("config.txt"))?;
    info!(
        "synthetic dataset with {} nodes and {} steps in {}; train with --config {}",
        spec.nodes,
        spec.total_steps,
        out.display(),
        out.join("config.txt").display()
    );
    Ok(())
}

fn save_run(run: &RunResult, cfg: &RunConfig, prepared: &Prepared, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let ck = Checkpoint {
        config: cfg.clone(),
        node_ids: prepared.series.node_ids.clone(),
        normalizer: run.normalizer.clone(),
        params: run.params.clone(),
    };
    ck.save(dir.join("model.ckpt"))?;
    write_history(&run.history, dir.join("history.csv"))?;
    write_report(&run.val, dir.join("metrics_val.csv"))?;
    write_report(&run.test, dir.join("metrics_test.csv"))?;
    cfg.save(dir.join("config.txt"))?;
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, repeats: usize) -> Result<()> {
    let prepared = prepare(cfg)?;
    let n = prepared.series.num_nodes();
    info!(
        "training on {} nodes, {} samples, {} parameters",
        n,
        prepared.experiment.dataset.len(),
        hagcn::model::param_count(&cfg.model, n)
    );
    let mut row = TableRow { label: "train".into(), runs: Vec::with_capacity(repeats) };
    for r in 0..repeats {
        let mut run_cfg = cfg.clone();
        run_cfg.train = TrainSettings { seed: repeat_seed(cfg.train.seed, r), ..cfg.train.clone() };
        let run = fit_and_evaluate(&run_cfg.model, &run_cfg.train, &prepared.experiment, cfg.data.noise_variance)?;
        info!("run {r}: best epoch {}, test {}", run.best_epoch, run.test.aggregate_line());
        let dir = if repeats == 1 { out.to_path_buf() } else { out.join(format!("run_{r}")) };
        save_run(&run, &run_cfg, &prepared, &dir)?;
        row.runs.push(run.test);
    }
    if repeats > 1 {
        write_table(std::slice::from_ref(&row), "run", out.join("summary.csv"))?;
        cfg.save(out.join("config.txt"))?;
        info!("mean test MAE over {repeats} runs: {:.4}", row.mean_test_mae());
    }
    Ok(())
}

/// Checkpoint plus the configured data it should be run on. Data settings
/// come from `--config` when given, otherwise from the checkpoint's echo.
fn load_checkpoint_and_data(cli: &Cli, path: &Path) -> Result<(Checkpoint, RunConfig, Prepared)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ck.config.clone(),
    };
    apply_overrides(&mut cfg, cli)?;
    cfg.model = ck.config.model.clone();
    let prepared = prepare(&cfg)?;
    if prepared.series.node_ids != ck.node_ids {
        bail!("checkpoint was trained on different nodes than {}", cfg.data.series[0].display());
    }
    Ok((ck, cfg, prepared))
}

fn plot(
    ck: &Checkpoint,
    prepared: &Prepared,
    node: usize,
    horizon: usize,
    split: Split,
    steps: usize,
    out: &Path,
) -> Result<()> {
    let ds = &prepared.experiment.dataset;
    ensure!(node < ds.num_nodes(), "--node {node} out of range, dataset has {} nodes", ds.num_nodes());
    ensure!((1..=ds.horizon()).contains(&horizon), "--horizon must be in 1..={}", ds.horizon());
    let (pred, target) = predict_split(&ck.params, &ck.config.model, ds, split, &ck.normalizer)?;
    let take = steps.min(pred.shape()[0]);
    ensure!(take > 0, "{split} split is empty");
    let series = |a: &ndarray::Array4<f64>| (0..take).map(|s| a[[s, horizon - 1, node, 0]]).collect::<Vec<_>>();
    let lines = [
        Line { label: "truth".into(), color: "black".into(), values: series(&target) },
        Line { label: "prediction".into(), color: "#d62728".into(), values: series(&pred) },
    ];
    let title = format!("node {} horizon {horizon} ({split})", ck.node_ids[node]);
    let path = out.join(format!("plot_node{node}_h{horizon}.svg"));
    write_svg(&line_plot_svg(&title, "sample", "value", &lines), &path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn plot_history(history: &Path, path: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(history).with_context(|| format!("reading {}", history.display()))?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .with_context(|| format!("malformed history row in {}", history.display()))
        };
        train.push(field(1)?);
        val.push(field(2)?);
    }
    let lines = [
        Line { label: "train L1".into(), color: "#1f77b4".into(), values: train },
        Line { label: "val MAE".into(), color: "#ff7f0e".into(), values: val },
    ];
    write_svg(&line_plot_svg("training history", "epoch", "loss", &lines), path)?;
    info!("wrote {}", path.display());
    Ok(())
}
