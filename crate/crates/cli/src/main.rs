use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tgcrf::dataset::TemporalGraphDataset;
use tgcrf::experiment::{
    evaluate_prediction_dir, load_source, predict_latest, run_experiment_to_dir, slug, structured_model_name,
    train_latest, ExperimentConfig,
};
use tgcrf::ext::StructuredModel;
use tgcrf::metrics::Metric;
use tgcrf::similarity::{
    common_history_similarity, comorbidity_similarity, histograms_from_attribute, js_divergence_similarity, sparsify,
    variogram, CoMeasure, HistoryVariant, SimilarityMatrix, SparsifyRule, UnknownCodePolicy, VariogramConfig,
};
use tgcrf::synth::{generate_ar_graph, SynthConfig};
use tgcrf::{Error, Result};

const FORECAST_FORMAT: &str = "tgcrf-forecast 1";

#[derive(Parser)]
#[command(name = "tgcrf", version, about = "Structured forecasting on evolving graphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (experiment config; synth config for `synth`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "tgcrf-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a long-format CSV and write it back in canonical form.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate a synthetic homophilous dataset and its true graph.
    Synth,
    /// Build a similarity graph and its variogram diagnostic.
    Graph(GraphArgs),
    /// Fit structured models for the step after the last observed one.
    Train,
    /// Forecast the step after the last observed one with trained models.
    Predict {
        /// Directory holding the `train` output.
        #[arg(long)]
        models: PathBuf,
    },
    /// Rebuild the evaluation report from a directory of prediction files.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Full rolling experiment.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphKind {
    CommonHistory,
    JsDivergence,
    Comorbidity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Measure {
    Count,
    Jaccard,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long, value_enum, default_value = "common-history")]
    kind: GraphKind,
    /// Long-format CSV; defaults to the dataset named by --config.
    #[arg(long)]
    input: Option<PathBuf>,
    /// History length (common-history) or histogram window (js-divergence).
    #[arg(long, default_value_t = 3)]
    h: usize,
    #[arg(long, default_value = "target")]
    attribute: String,
    #[arg(long, default_value = "mean-absolute")]
    variant: HistoryVariant,
    /// Histogram bins for js-divergence.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Patient records for comorbidity: one record per line, comma-separated codes.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "jaccard")]
    measure: Measure,
    /// Drop record codes that are not dataset nodes instead of failing.
    #[arg(long)]
    skip_unknown: bool,
    /// `top-k:K` or `threshold:X`.
    #[arg(long)]
    sparsify: Option<SparsifyRule>,
    /// Timestep whose targets the variogram uses; the graph is built from
    /// history before it. Defaults to the last timestep.
    #[arg(long)]
    at: Option<i64>,
    #[arg(long, default_value_t = 20)]
    variogram_bins: usize,
}

trait Staged<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> Staged<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            tagged @ Error::Stage { .. } => tagged,
            other => other.in_stage(stage),
        })
    }
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_error(path))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(io_error(path))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().map_err(io_error(path))
}

fn experiment_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("--config is required".into()))
        .stage("config")?;
    let mut cfg = ExperimentConfig::read_path(path).stage("config")?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().stage("config")?;
    Ok(cfg)
}

fn ingest(common: &Common, input: Option<&Path>) -> Result<()> {
    let ds = match input {
        Some(p) => TemporalGraphDataset::ingest_path(p, &Default::default()).stage("ingest")?,
        None => load_source(&experiment_config(common)?).stage("ingest")?.0,
    };
    create_dir(&common.out).stage("output")?;
    ds.write_csv_path(common.out.join("dataset.csv")).stage("output")?;
    let missing = ds.mask().iter().filter(|m| !**m).count();
    println!(
        "{} nodes, {} timesteps, {} unobserved cells, attributes: [{}]",
        ds.n_nodes(),
        ds.n_timesteps(),
        missing,
        ds.attribute_names().join(", ")
    );
    Ok(())
}

fn synth(common: &Common) -> Result<()> {
    let mut cfg = match &common.config {
        Some(p) => SynthConfig::read_path(p).stage("config")?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let (ds, truth) = generate_ar_graph(&cfg).stage("ingest")?;
    let out = &common.out;
    create_dir(out).stage("output")?;
    ds.write_csv_path(out.join("dataset.csv")).stage("output")?;
    write_file(&out.join("truth_similarity.txt"), |w| truth.write_triplets(w)).stage("output")?;
    fs::write(out.join("synth.cfg"), cfg.to_kv()).map_err(io_error(&out.join("synth.cfg"))).stage("output")?;
    println!("{} nodes x {} timesteps written to {}", ds.n_nodes(), ds.n_timesteps(), out.display());
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = fs::File::open(path).map_err(io_error(path))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_error(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        records.push(line.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect());
    }
    Ok(records)
}

fn graph(common: &Common, args: &GraphArgs) -> Result<()> {
    let ds = match &args.input {
        Some(p) => TemporalGraphDataset::ingest_path(p, &Default::default()).stage("ingest")?,
        None => load_source(&experiment_config(common)?).stage("ingest")?.0,
    };
    let row = match args.at {
        Some(label) => ds
            .timesteps()
            .iter()
            .position(|&t| t == label)
            .ok_or_else(|| Error::InvalidInput(format!("timestep {label} not in dataset")))
            .stage("graph")?,
        None => ds.n_timesteps() - 1,
    };
    let sim = match args.kind {
        GraphKind::CommonHistory => common_history_similarity(&ds, &args.attribute, args.h, row, args.variant),
        GraphKind::JsDivergence => {
            let start = row.checked_sub(args.h).ok_or(Error::InsufficientSamples {
                needed: args.h,
                available: row,
            });
            start
                .and_then(|s| histograms_from_attribute(&ds, &args.attribute, s..row, args.bins))
                .and_then(|h| js_divergence_similarity(&h))
        }
        GraphKind::Comorbidity => {
            let path = args
                .records
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("--records is required for comorbidity".into()))
                .stage("config")?;
            let records = read_records(path).stage("ingest")?;
            let measure = match args.measure {
                Measure::Count => CoMeasure::Count,
                Measure::Jaccard => CoMeasure::Jaccard,
            };
            let unknown = if args.skip_unknown {
                UnknownCodePolicy::Skip
            } else {
                UnknownCodePolicy::Fail
            };
            comorbidity_similarity(ds.node_ids(), &records, measure, unknown)
        }
    }
    .stage("graph")?;
    let sim: SimilarityMatrix = match args.sparsify {
        Some(rule) => sparsify(&sim, rule).stage("graph")?,
        None => sim,
    };
    let targets: Vec<f64> = ds.targets().row(row).iter().copied().collect();
    let cfg = VariogramConfig {
        n_bins: args.variogram_bins,
        ..Default::default()
    };
    let report = variogram(&sim, &targets, &cfg).stage("evaluate")?;

    let out = &common.out;
    create_dir(out).stage("output")?;
    write_file(&out.join("similarity.txt"), |w| sim.write_triplets(w)).stage("output")?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string())).stage("output")?;
    let path = out.join("variogram.json");
    fs::write(&path, json + "\n").map_err(io_error(&path)).stage("output")?;
    println!(
        "{} edges; variogram verdict {:?} (spearman {:.3}, overall variance {:.4})",
        sim.edges().len(),
        report.verdict,
        report.spearman,
        report.overall_variance
    );
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = experiment_config(common)?;
    let models = train_latest(&cfg)?;
    let dir = common.out.join("models");
    create_dir(&dir).stage("output")?;
    for (name, model) in &models {
        write_file(&dir.join(format!("{}.txt", slug(name))), |w| model.write(w)).stage("output")?;
        println!("trained {name}");
    }
    let path = common.out.join("config.cfg");
    fs::write(&path, cfg.to_kv()).map_err(io_error(&path)).stage("output")?;
    Ok(())
}

fn predict(common: &Common, model_dir: &Path) -> Result<()> {
    let cfg = experiment_config(common)?;
    let mut models: Vec<(String, StructuredModel)> = Vec::new();
    for &family in &cfg.families {
        for &kind in &cfg.models {
            let name = structured_model_name(kind, family);
            let path = model_dir.join("models").join(format!("{}.txt", slug(&name)));
            if !path.exists() {
                continue;
            }
            let file = fs::File::open(&path).map_err(io_error(&path)).stage("ingest")?;
            models.push((name, StructuredModel::read(BufReader::new(file)).stage("ingest")?));
        }
    }
    if models.is_empty() {
        return Err(Error::InvalidInput(format!("no trained models under {}", model_dir.display()))).stage("ingest");
    }
    let forecasts = predict_latest(&cfg, &models)?;
    let (ds, _) = load_source(&cfg).stage("ingest")?;
    create_dir(&common.out).stage("output")?;
    let path = common.out.join("forecast.csv");
    write_file(&path, |w| {
        let io = |e| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        writeln!(w, "{FORECAST_FORMAT}").map_err(io)?;
        writeln!(w, "model,node,mean,variance").map_err(io)?;
        for (name, dists) in &forecasts {
            for (node, d) in ds.node_ids().iter().zip(dists) {
                writeln!(w, "{name},{node},{:.9e},{:.9e}", d.mean, d.variance).map_err(io)?;
            }
        }
        Ok(())
    })
    .stage("output")?;
    println!("{} models forecast to {}", forecasts.len(), path.display());
    Ok(())
}

fn evaluate(common: &Common, predictions: &Path) -> Result<()> {
    let report = evaluate_prediction_dir(predictions).stage("evaluate")?;
    let dir = common.out.join("reports");
    create_dir(&dir).stage("output")?;
    write_file(&dir.join("report.json"), |w| report.write_json(w)).stage("output")?;
    for metric in [Metric::Rmse, Metric::Nlpd, Metric::Coverage95] {
        let path = dir.join(format!("{}.csv", metric.label().to_ascii_lowercase()));
        write_file(&path, |w| report.write_table(metric, w)).stage("output")?;
    }
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &tgcrf::metrics::EvaluationReport) {
    println!("{:<14} {:>10} {:>10} {:>8}", "model", "RMSE", "NLPD", "COV95");
    for m in &report.models {
        let a = &m.average;
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        println!(
            "{:<14} {:>10.4} {:>10} {:>8}",
            m.name,
            a.rmse,
            opt(a.nlpd, 4),
            opt(a.coverage95, 3)
        );
    }
}

fn run(common: &Common) -> Result<()> {
    let cfg = experiment_config(common)?;
    let res = run_experiment_to_dir(&cfg, &common.out)?;
    print_summary(&res.report);
    println!("outputs in {}", common.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let outcome = match &cli.command {
        Command::Ingest { input } => ingest(c, input.as_deref()),
        Command::Synth => synth(c),
        Command::Graph(args) => graph(c, args),
        Command::Train => train(c),
        Command::Predict { models } => predict(c, models),
        Command::Evaluate { predictions } => evaluate(c, predictions),
        Command::Run => run(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
