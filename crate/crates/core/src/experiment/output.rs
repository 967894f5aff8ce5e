use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{check_experiment, model_order_key, run_experiment, ExperimentConfig, ExperimentResult};
use crate::error::{Error, Result, StageExt};
use crate::metrics::{build_report, EvaluationReport, Metric, ModelRun, MonthOutput};
use crate::synth::SynthConfig;
use crate::textfmt::Record;

pub const PREDICTIONS_FORMAT: &str = "tgcrf-predictions 1";
pub const MANIFEST_FORMAT: &str = "tgcrf-manifest 1";
const INCOMPLETE: &str = "INCOMPLETE";

/// File-name form of a model name: `GCRF + LR` becomes `gcrf_lr`.
pub fn slug(name: &str) -> String {
    name.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|p| !p.is_empty())
        .map(|p| p.to_ascii_lowercase())
        .collect::<Vec<_>>()
        .join("_")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// `month,node,mean,variance,truth` rows after a format line and a
/// `model,<name>` line. Values carry 10 significant digits.
pub fn write_predictions<W: Write>(
    mut w: W,
    run: &ModelRun,
    months: &[String],
    nodes: &[String],
    truths: &[Vec<f64>],
) -> Result<()> {
    let io = |e| Error::io("predictions sink", e);
    writeln!(w, "{PREDICTIONS_FORMAT}").map_err(io)?;
    writeln!(w, "model,{}", run.name).map_err(io)?;
    writeln!(w, "month,node,mean,variance,truth").map_err(io)?;
    for ((month, out), y) in months.iter().zip(&run.months).zip(truths) {
        for (i, node) in nodes.iter().enumerate() {
            let var = out.variances.as_ref().map(|v| format!("{:.9e}", v[i])).unwrap_or_default();
            writeln!(w, "{month},{node},{:.9e},{var},{:.9e}", out.means[i], y[i]).map_err(io)?;
        }
    }
    Ok(())
}

/// Parsed prediction file: the run plus months, nodes and truths.
pub fn read_predictions<R: BufRead>(r: R) -> Result<(ModelRun, Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = r.lines();
    let mut next = || -> Result<Option<String>> {
        lines.next().transpose().map_err(|e| Error::io("predictions source", e))
    };
    let first = next()?.unwrap_or_default();
    if first.trim() != PREDICTIONS_FORMAT {
        return Err(Error::Parse(format!("expected {PREDICTIONS_FORMAT:?}, got {first:?}")));
    }
    let name = next()?
        .and_then(|l| l.strip_prefix("model,").map(str::to_string))
        .ok_or_else(|| Error::Parse("missing model line".into()))?;
    next()?;
    let mut months: Vec<String> = Vec::new();
    let mut nodes: Vec<String> = Vec::new();
    let mut outs: Vec<MonthOutput> = Vec::new();
    let mut truths: Vec<Vec<f64>> = Vec::new();
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number {s:?}")));
    while let Some(line) = next()? {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("bad prediction row {line:?}")));
        }
        if months.last().map(String::as_str) != Some(f[0]) {
            months.push(f[0].to_string());
            outs.push(MonthOutput {
                means: Vec::new(),
                variances: (!f[3].is_empty()).then(Vec::new),
            });
            truths.push(Vec::new());
        }
        if months.len() == 1 {
            nodes.push(f[1].to_string());
        }
        let out = outs.last_mut().expect("pushed above");
        out.means.push(num(f[2])?);
        if let Some(v) = &mut out.variances {
            v.push(num(f[3])?);
        }
        truths.last_mut().expect("pushed above").push(num(f[4])?);
    }
    Ok((ModelRun { name, months: outs }, months, nodes, truths))
}

/// Rebuild the evaluation report from every prediction file in `dir`.
pub fn evaluate_prediction_dir(dir: &Path) -> Result<EvaluationReport> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("no prediction files in {}", dir.display())));
    }
    let mut runs = Vec::new();
    let mut reference: Option<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> = None;
    for p in &paths {
        let f = fs::File::open(p).map_err(io_err(p))?;
        let (run, months, nodes, truths) = read_predictions(BufReader::new(f))?;
        match &reference {
            None => reference = Some((months, nodes, truths)),
            Some((m, n, _)) if *m != months || *n != nodes => {
                return Err(Error::InvalidInput(format!("{} covers different months or nodes", p.display())));
            }
            _ => {}
        }
        runs.push(run);
    }
    let (months, nodes, truths) = reference.expect("at least one file");
    runs.sort_by_key(|r| model_order_key(&r.name));
    build_report(&months, &nodes, &truths, &runs)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Write predictions/, models/, reports/, the canonical config and the
/// manifest under `out`.
pub fn write_outputs(res: &ExperimentResult, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let pred_dir = out.join("predictions");
    let model_dir = out.join("models");
    let report_dir = out.join("reports");
    for d in [&pred_dir, &model_dir, &report_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut files: Vec<PathBuf> = Vec::new();
    for run in &res.runs {
        let p = pred_dir.join(format!("{}.csv", slug(&run.name)));
        let mut w = create(&p)?;
        write_predictions(&mut w, run, &res.months, &res.nodes, &res.truths)?;
        w.flush().map_err(io_err(&p))?;
        files.push(p);
    }
    for (name, month, model) in &res.models {
        let p = model_dir.join(format!("{}_{}.txt", slug(name), slug(month)));
        let mut w = create(&p)?;
        model.write(&mut w)?;
        w.flush().map_err(io_err(&p))?;
        files.push(p);
    }
    let json = report_dir.join("report.json");
    let mut w = create(&json)?;
    res.report.write_json(&mut w)?;
    w.flush().map_err(io_err(&json))?;
    files.push(json);
    for metric in [Metric::Rmse, Metric::Nlpd, Metric::Coverage95] {
        let p = report_dir.join(format!("{}.csv", metric.label().to_ascii_lowercase()));
        let mut w = create(&p)?;
        res.report.write_table(metric, &mut w)?;
        w.flush().map_err(io_err(&p))?;
        files.push(p);
    }
    for m in res.report.models.iter().filter(|m| !m.per_node.is_empty()) {
        let p = report_dir.join(format!("node_nlpd_{}.csv", slug(&m.name)));
        let mut w = create(&p)?;
        res.report.write_node_nlpd(&m.name, &mut w)?;
        w.flush().map_err(io_err(&p))?;
        files.push(p);
    }
    let training = report_dir.join("training.json");
    let text = serde_json::to_string_pretty(&res.training).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&training, text).map_err(io_err(&training))?;
    files.push(training);
    let cfg_path = out.join("config.cfg");
    fs::write(&cfg_path, cfg.to_kv()).map_err(io_err(&cfg_path))?;
    files.push(cfg_path);

    let mut rec = Record::default();
    rec.push("config_sha256", &res.config_hash);
    rec.push("seed", cfg.seed);
    if let super::DataSource::Synth(SynthConfig { seed, .. }) = &cfg.source {
        rec.push("synth_seed", seed);
        rec.push("synth_rng", crate::synth::RNG_NAME);
    }
    files.sort();
    for f in &files {
        let rel = f.strip_prefix(out).unwrap_or(f);
        rec.push("file", format!("{} {}", rel.display(), sha256_file(f)?));
    }
    let manifest = out.join("manifest.txt");
    let mut w = create(&manifest)?;
    rec.write(MANIFEST_FORMAT, &mut w)?;
    w.flush().map_err(io_err(&manifest))?;
    Ok(())
}

/// Run the experiment and write its outputs. An `INCOMPLETE` marker sits in
/// `out` until everything has been written.
pub fn run_experiment_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    check_experiment(cfg)?;
    fs::create_dir_all(out).map_err(io_err(out)).stage("output")?;
    let marker = out.join(INCOMPLETE);
    fs::write(&marker, "run did not finish\n").map_err(io_err(&marker)).stage("output")?;
    let res = run_experiment(cfg)?;
    write_outputs(&res, cfg, out).stage("output")?;
    fs::remove_file(&marker).map_err(io_err(&marker)).stage("output")?;
    Ok(res)
}
