//! Experiment harness for the hypergraph trajectory-prediction lab.
//!
//! Subcommands: `simulate`, `train`, `predict`, `eval`, `reason`, `sweep`,
//! `plot`, `config`. Exit codes: 0 success, 2 config error, 3 I/O error,
//! 4 numeric error, 1 anything else.

mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hypertraj::config::ExperimentConfig;
use hypertraj::error::{Error, Result};
use hypertraj::eval::{
    category_probe, evaluate_predictions, group_probe, strength_probe, CategoryReport,
    GroupReport, Reduction, StrengthReport,
};
use hypertraj::fsutil::write_atomic;
use hypertraj::nmp::ScaleInteractions;
use hypertraj::predictor::{predict, train, TrainedModel};
use hypertraj::sim::{generate_dataset, Dataset, Experiment, LabelledSample};

#[derive(Parser)]
#[command(name = "hypertraj", version, about = "Multi-agent trajectory prediction lab with hypergraph relational reasoning")]
struct Cli {
    /// Override the config's seed (or the sampling seed for predict/eval).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory (meaning depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset (JSON lines).
    Simulate(SimulateArgs),
    /// Train the predictor on a dataset directory -> checkpoint + logs.
    Train(TrainArgs),
    /// Sample K future trajectories per scene from a checkpoint.
    Predict(PredictArgs),
    /// Displacement metrics of sampled predictions against a dataset.
    Eval(EvalArgs),
    /// Relational-reasoning report: interactions per sample plus probes.
    Reason(ReasonArgs),
    /// Train/evaluate one run per scale list and tabulate the metrics.
    Sweep(SweepArgs),
    /// Render a CSV (loss log or scatter points) as an SVG.
    Plot(PlotArgs),
    /// Emit or validate configuration documents.
    Config(ConfigArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of samples to generate.
    #[arg(long, default_value_t = 100)]
    samples: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Resume from an epoch-boundary checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Samples per scene.
    #[arg(long, default_value_t = 20)]
    k: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Best-of-K per scene instead of per agent.
    #[arg(long)]
    per_scene: bool,
    /// Also write per-scene metrics CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReasonArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Training dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset for metrics (defaults to `--data`).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Semicolon-separated scale lists, e.g. "2,3;3;" (empty = pairwise only).
    #[arg(long)]
    scales: String,
    #[arg(long, default_value_t = 20)]
    k: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Input CSV: `epoch,...` becomes loss curves, two columns a scatter.
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Emit the default configuration for an experiment.
    #[arg(long)]
    defaults: bool,
    #[arg(long, default_value = "mixed6")]
    experiment: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2u8,
                Error::Io(_) => 3u8,
                Error::Numeric(_) | Error::Simulation(_) => 4u8,
                _ => 1u8,
            })
        }
    }
}

fn required<T: Clone>(opt: &Option<T>, flag: &str) -> Result<T> {
    opt.clone()
        .ok_or_else(|| Error::config(format!("missing required {flag}")))
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let path = required(cli_config, "--config")?;
    let mut cfg = ExperimentConfig::read(&path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn path_or(cfg_path: &Option<String>, arg: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg_path.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::config(format!("missing required {flag}")))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(&cli, args),
        Command::Train(args) => cmd_train(&cli, args),
        Command::Predict(args) => cmd_predict(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Reason(args) => cmd_reason(&cli, args),
        Command::Sweep(args) => cmd_sweep(&cli, args),
        Command::Plot(args) => cmd_plot(&cli, args),
        Command::Config(args) => cmd_config(&cli, args),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    let out = path_or(&cfg.paths.out, &cli.out, "--out")?;
    let ds = generate_dataset(cfg.experiment, &cfg.scene_config, args.samples, cfg.seed)?;
    ds.write_jsonl(&out)?;
    println!(
        "wrote {} samples ({}) to {}",
        ds.samples.len(),
        cfg.experiment,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    let data = path_or(&cfg.paths.data, &args.data, "--data")?;
    let out = path_or(&cfg.paths.out, &cli.out, "--out")?;
    let dataset = Dataset::read_jsonl(&data)?;
    let outcome = train(&cfg, &dataset, &out, args.resume.as_deref())?;
    println!(
        "trained {} epochs; checkpoint {}",
        outcome.epochs_done,
        outcome.checkpoint.display()
    );
    if let Some(l) = outcome.final_loss {
        println!("final batch loss: total {:.6}", l.total);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PredictionRecord {
    sample_id: usize,
    /// `[k][agent][frame][xy]`
    futures: Vec<Vec<Vec<[f64; 2]>>>,
}

fn load_model(cli: &Cli, checkpoint: &Option<PathBuf>) -> Result<(TrainedModel, PathBuf)> {
    // paths.checkpoint in the model's own sidecar cannot bootstrap discovery,
    // so the flag (or a config with paths.checkpoint) is required.
    let ckpt = match checkpoint {
        Some(c) => c.clone(),
        None => {
            let cfg = load_config(&cli.config, None)?;
            PathBuf::from(required(&cfg.paths.checkpoint, "--checkpoint")?)
        }
    };
    Ok((TrainedModel::load(&ckpt)?, ckpt))
}

fn cmd_predict(cli: &Cli, args: &PredictArgs) -> Result<()> {
    let (model, _) = load_model(cli, &args.checkpoint)?;
    let data = path_or(&model.config.paths.data, &args.data, "--data")?;
    let out = path_or(&model.config.paths.out, &cli.out, "--out")?;
    let dataset = Dataset::read_jsonl(&data)?;
    let samples: Vec<&LabelledSample> = dataset.samples.iter().collect();
    if samples.is_empty() {
        return Err(Error::config("dataset has no samples"));
    }
    let seed = cli.seed.unwrap_or(model.config.seed);
    let preds = predict(&model, &samples, args.k, seed)?;
    let mut buf = Vec::new();
    for b in 0..preds.n_scenes {
        let mut futures = Vec::with_capacity(preds.k);
        for k in 0..preds.k {
            let mut agents = Vec::with_capacity(preds.n_agents);
            for a in 0..preds.n_agents {
                agents.push(
                    (0..preds.t_future)
                        .map(|f| preds.at(k, b, a, f))
                        .collect::<Vec<[f64; 2]>>(),
                );
            }
            futures.push(agents);
        }
        serde_json::to_writer(&mut buf, &PredictionRecord { sample_id: b, futures })?;
        buf.push(b'\n');
    }
    write_atomic(&out, &buf)?;
    println!(
        "wrote {} x {} predicted futures to {}",
        preds.n_scenes,
        preds.k,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (model, _) = load_model(cli, &args.checkpoint)?;
    let data = path_or(&model.config.paths.data, &args.data, "--data")?;
    let out = path_or(&model.config.paths.out, &cli.out, "--out")?;
    let dataset = Dataset::read_jsonl(&data)?;
    let samples: Vec<&LabelledSample> = dataset.samples.iter().collect();
    if samples.is_empty() {
        return Err(Error::config("dataset has no samples"));
    }
    let seed = cli.seed.unwrap_or(model.config.seed);
    let preds = predict(&model, &samples, args.k, seed)?;
    let reduction = if args.per_scene {
        Reduction::PerScene
    } else {
        Reduction::PerAgent
    };
    let metrics = evaluate_predictions(&preds, &dataset, 0, reduction)?;
    write_atomic(&out, serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    if let Some(csv_path) = &args.csv {
        let mut csv = String::from("scene,min_ade,min_fde\n");
        for (i, r) in metrics.per_scene.iter().enumerate() {
            csv.push_str(&format!("{i},{},{}\n", r.min_ade, r.min_fde));
        }
        write_atomic(csv_path, csv.as_bytes())?;
    }
    println!(
        "minADE_{} {:.6}  minFDE_{} {:.6}  ({} scenes)",
        args.k, metrics.min_ade, args.k, metrics.min_fde, metrics.n_scenes
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// reason
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SampleInteractions<'a> {
    sample_id: usize,
    scales: &'a [ScaleInteractions],
}

#[derive(Serialize)]
struct ReasoningReport {
    experiment: Experiment,
    n_samples: usize,
    category: Option<CategoryReport>,
    strength: Option<StrengthReport>,
    groups: Option<GroupReport>,
}

fn cmd_reason(cli: &Cli, args: &ReasonArgs) -> Result<()> {
    let (model, _) = load_model(cli, &args.checkpoint)?;
    let data = path_or(&model.config.paths.data, &args.data, "--data")?;
    let out_dir = path_or(&model.config.paths.out, &cli.out, "--out")?;
    let dataset = Dataset::read_jsonl(&data)?;
    if dataset.samples.is_empty() {
        return Err(Error::config("dataset has no samples"));
    }
    std::fs::create_dir_all(&out_dir)?;

    // per-sample interaction dump
    let mut buf = Vec::new();
    hypertraj::eval::for_each_scene_interactions(&model, &dataset, |idx, _, scales| {
        serde_json::to_writer(
            &mut buf,
            &SampleInteractions {
                sample_id: idx,
                scales,
            },
        )?;
        buf.push(b'\n');
        Ok(())
    })?;
    write_atomic(&out_dir.join("samples.jsonl"), &buf)?;

    // probes, where the dataset supports them
    let has_labels = dataset.samples.iter().any(|s| !s.groups.is_empty());
    let has_charges = dataset.samples.iter().all(|s| s.charge.is_some());
    let kinds: std::collections::BTreeSet<String> = dataset
        .samples
        .iter()
        .flat_map(|s| s.types.iter().map(|k| k.to_string()))
        .collect();
    let category = if has_labels && kinds.len() == model.config.model.l_categories {
        Some(category_probe(&model, &dataset, 0.2)?)
    } else {
        None
    };
    let strength = if has_charges {
        Some(strength_probe(&model, &dataset)?)
    } else {
        None
    };
    let groups = if has_labels {
        Some(group_probe(&model, &dataset)?)
    } else {
        None
    };

    if let Some(s) = &strength {
        let mut csv = String::from("charge,strength\n");
        for (q, r) in &s.points {
            csv.push_str(&format!("{q},{r}\n"));
        }
        write_atomic(&out_dir.join("points.csv"), csv.as_bytes())?;
    }
    let report = ReasoningReport {
        experiment: dataset.meta.experiment,
        n_samples: dataset.samples.len(),
        category,
        strength,
        groups,
    };
    write_atomic(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    if let Some(c) = &report.category {
        println!("category accuracy: {:.4} (over {} scored)", c.accuracy, c.n_scored);
    }
    if let Some(s) = &report.strength {
        println!("strength spearman rho: {:.4}", s.spearman_rho);
    }
    if let Some(gr) = &report.groups {
        for t in &gr.per_type {
            println!(
                "{} (size {}): recovered {}/{} = {:.4}",
                t.kind, t.group_size, t.recovered, t.total, t.rate
            );
        }
    }
    println!("reports in {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SweepRow {
    scales: Vec<usize>,
    min_ade: f64,
    min_fde: f64,
    k: usize,
}

fn parse_scale_lists(spec: &str) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for part in spec.split(';') {
        let part = part.trim();
        if part.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let list: std::result::Result<Vec<usize>, _> =
            part.split(',').map(|t| t.trim().parse::<usize>()).collect();
        out.push(list.map_err(|_| Error::config(format!("bad scale list '{part}'")))?);
    }
    if out.is_empty() {
        return Err(Error::config("sweep needs at least one scale list"));
    }
    Ok(out)
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let base = load_config(&cli.config, cli.seed)?;
    let data = path_or(&base.paths.data, &args.data, "--data")?;
    let out_dir = path_or(&base.paths.out, &cli.out, "--out")?;
    let train_set = Dataset::read_jsonl(&data)?;
    let eval_set = match &args.eval_data {
        Some(p) => Dataset::read_jsonl(p)?,
        None => train_set.clone(),
    };
    std::fs::create_dir_all(&out_dir)?;

    let mut rows = Vec::new();
    for scales in parse_scale_lists(&args.scales)? {
        let mut cfg = base.clone();
        cfg.model.scales = scales.clone();
        cfg.validate()?;
        let label = scales
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let run_dir = out_dir.join(format!(
            "run_{}",
            if label.is_empty() { "pairwise" } else { &label }
        ));
        let outcome = train(&cfg, &train_set, &run_dir, None)?;
        let model = TrainedModel::load(&outcome.checkpoint)?;
        let samples: Vec<&LabelledSample> = eval_set.samples.iter().collect();
        let preds = predict(&model, &samples, args.k, cfg.seed)?;
        let metrics = evaluate_predictions(&preds, &eval_set, 0, Reduction::PerAgent)?;
        println!(
            "scales [{label}]: minADE_{} {:.6} minFDE_{} {:.6}",
            args.k, metrics.min_ade, args.k, metrics.min_fde
        );
        rows.push(SweepRow {
            scales,
            min_ade: metrics.min_ade,
            min_fde: metrics.min_fde,
            k: args.k,
        });
    }
    write_atomic(
        &out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&rows)?.as_bytes(),
    )?;
    let mut csv = String::from("scales,min_ade,min_fde,k\n");
    for row in &rows {
        let label = row
            .scales
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        csv.push_str(&format!(
            "\"{label}\",{},{},{}\n",
            row.min_ade, row.min_fde, row.k
        ));
    }
    write_atomic(&out_dir.join("sweep.csv"), csv.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

fn cmd_plot(cli: &Cli, args: &PlotArgs) -> Result<()> {
    let out = required(&cli.out, "--out")?;
    let text = std::fs::read_to_string(&args.csv)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(|s| s.trim().to_string()).collect(),
        None => Vec::new(),
    };
    let rows: Vec<Vec<f64>> = lines
        .map(|l| {
            l.split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|_| Error::config(format!("non-numeric CSV row '{l}'")))
        })
        .collect::<Result<_>>()?;

    let svg = if rows.is_empty() {
        eprintln!("warning: empty CSV, emitting an empty plot");
        svg::scatter(
            &[],
            header.first().map(String::as_str).unwrap_or("x"),
            header.get(1).map(String::as_str).unwrap_or("y"),
        )
    } else if header.first().map(String::as_str) == Some("epoch") {
        let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let series: Vec<(String, Vec<f64>)> = header[1..]
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), rows.iter().map(|r| r[i + 1]).collect()))
            .collect();
        svg::lines(&x, &series, "epoch")
    } else if header.len() == 2 {
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
        svg::scatter(&points, &header[0], &header[1])
    } else {
        return Err(Error::config(format!(
            "cannot infer plot type from header {header:?}"
        )));
    };
    write_atomic(&out, svg.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

fn cmd_config(cli: &Cli, args: &ConfigArgs) -> Result<()> {
    if args.defaults {
        let experiment = match args.experiment.as_str() {
            "mixed6" => Experiment::Mixed6,
            "category3" => Experiment::Category3,
            "category2" => Experiment::Category2,
            "charged2" => Experiment::Charged2,
            other => {
                return Err(Error::config(format!(
                    "unknown experiment '{other}' (mixed6|category3|category2|charged2)"
                )))
            }
        };
        let cfg = ExperimentConfig::defaults(experiment);
        let json = cfg.to_json_pretty()?;
        match &cli.out {
            Some(path) => {
                write_atomic(path, json.as_bytes())?;
                println!("wrote {}", path.display());
            }
            None => println!("{json}"),
        }
        Ok(())
    } else {
        // validate and echo the normalized document
        let cfg = load_config(&cli.config, cli.seed)?;
        println!("{}", cfg.to_json_pretty()?);
        Ok(())
    }
}

