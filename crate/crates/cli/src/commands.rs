use std::fs;
use std::path::{Path, PathBuf};

use dfl_core::data::{
    gen_biased_classification, gen_biased_with_composition, gen_toy_sdr, ingest_csv, ingest_matrix, split, write_matrix,
    CsvOptions, LabeledDataset, Schema, Splits, BALANCED_COMPOSITION, BIASED_COMPOSITION,
};
use dfl_core::dependence::{dc_conditional, dc_fast, dc_naive, SampleMatrix};
use dfl_core::metrics::{audit as audit_predictions, evaluate as evaluate_model, EvalOptions, FairnessReport, PredictionSet};
use dfl_core::network::{self, ModelParams};
use dfl_core::training::{self, derive_seed, write_trajectory, TrainOutcome};
use serde::Serialize;
use serde_json::json;

use crate::config::{DataSource, NetKind, RunConfig, TestSet};
use crate::{CliError, EXIT_OK, EXIT_WARNING};

/// What a command prints on stdout and the exit code it wants.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub stdout: String,
    pub code: u8,
}

impl CommandOutput {
    fn ok(stdout: String) -> Self {
        CommandOutput { stdout, code: EXIT_OK }
    }
}

/// Metrics file layout: the report fields plus the config hash.
#[derive(Debug, Serialize)]
pub struct MetricsJson<'a> {
    #[serde(flatten)]
    pub report: &'a FairnessReport,
    pub config_hash: Option<String>,
}

fn to_json(v: &impl Serialize) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub fn metrics_json(report: &FairnessReport, config_hash: Option<String>) -> Result<String, CliError> {
    to_json(&MetricsJson { report, config_hash })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads or generates the dataset described by `cfg` and splits it.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let d = &cfg.data;
    let ds = match &d.source {
        DataSource::SynthBiased => gen_biased_classification(d.n, d.p, d.bias, d.seed)?,
        DataSource::SynthToy => gen_toy_sdr(d.n, d.noise_sd, d.seed)?,
        DataSource::Csv { path, schema } => {
            let text = fs::read_to_string(schema)
                .map_err(|e| CliError::Config(format!("cannot read schema {}: {e}", schema.display())))?;
            let schema = Schema::parse(&text)?;
            let opts = CsvOptions {
                standardize: false,
                lenient: d.lenient,
            };
            ingest_csv(path, &schema, opts)?
        }
        DataSource::Matrix { path } => ingest_matrix(path)?,
    };
    let mut splits = split(&ds, d.split, d.seed, d.stratify)?;
    if d.test == TestSet::Balanced {
        splits.test = gen_biased_with_composition(d.test_n, d.p, d.bias, derive_seed(d.seed, 1), BALANCED_COMPOSITION)?;
    }
    if d.standardize {
        splits.standardize();
    }
    Ok(splits)
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        with_dc: true,
        dc_max_samples: cfg.dc_max_samples,
    }
}

fn fit(cfg: &RunConfig, splits: &Splits) -> Result<TrainOutcome, dfl_core::Error> {
    match cfg.net_kind {
        NetKind::Dense => {
            let spec = cfg.network_spec(splits.train.p(), splits.train.k);
            training::train(splits, spec, &cfg.train)
        }
        NetKind::Standard => training::train_standard(splits, cfg.hidden, &cfg.train),
    }
}

/// Trains the configured model and writes `config.resolved`, `model.dflm`,
/// `trajectory.csv` and `metrics.json` into the output directory.
pub fn train(cfg: &RunConfig) -> Result<CommandOutput, CliError> {
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.resolved"), cfg.resolved_text().as_bytes())?;
    let splits = load_splits(cfg)?;
    let out = match fit(cfg, &splits) {
        Ok(out) => out,
        Err(dfl_core::Error::Divergence {
            epoch,
            step,
            checkpoint,
            ..
        }) => {
            let path = cfg.out.join("checkpoint.dflm");
            write_file(&path, &network::save_to_vec(&checkpoint))?;
            return Err(CliError::Diverged {
                epoch,
                step,
                checkpoint: path,
            });
        }
        Err(e) => return Err(e.into()),
    };
    write_file(&cfg.out.join("model.dflm"), &network::save_to_vec(&out.model))?;
    let mut csv = Vec::new();
    write_trajectory(&out.trajectory, &mut csv)?;
    write_file(&cfg.out.join("trajectory.csv"), &csv)?;
    let report = evaluate_model(&out.model, &splits.test, eval_options(cfg))?;
    let text = metrics_json(&report, Some(cfg.hash()))?;
    write_file(&cfg.out.join("metrics.json"), text.as_bytes())?;
    eprintln!(
        "trained {} epochs: test accuracy {:.2}, TPR gap {:.2}, MCDP gap {:.2}; outputs in {}",
        out.trajectory.len(),
        report.accuracy,
        report.tpr_gap,
        report.mcdp_gap,
        cfg.out.display()
    );
    Ok(CommandOutput::ok(text))
}

pub fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Config(format!("cannot open model {}: {e}", path.display())))?;
    Ok(network::load(std::io::BufReader::new(f))?)
}

fn pick_split<'a>(splits: &'a Splits, name: &str) -> Result<&'a LabeledDataset, CliError> {
    match name {
        "train" => Ok(&splits.train),
        "val" => Ok(&splits.val),
        "test" => Ok(&splits.test),
        other => Err(CliError::Config(format!("unknown split {other:?} (expected train, val or test)"))),
    }
}

/// Reports metrics of a saved model on one split of the configured data.
pub fn evaluate(cfg: &RunConfig, model_path: &Path, split_name: &str) -> Result<CommandOutput, CliError> {
    let model = load_model(model_path)?;
    let splits = load_splits(cfg)?;
    let report = evaluate_model(&model, pick_split(&splits, split_name)?, eval_options(cfg))?;
    Ok(CommandOutput::ok(metrics_json(&report, Some(cfg.hash()))?))
}

/// Trains a fresh one-hidden-layer classifier on the frozen representation
/// of a saved model and reports its test metrics.
pub fn probe(cfg: &RunConfig, model_path: &Path, hidden: Option<usize>) -> Result<CommandOutput, CliError> {
    let model = load_model(model_path)?;
    let splits = load_splits(cfg)?;
    let (out, report) = training::train_probe(&model, &splits, hidden.unwrap_or(cfg.hidden), &cfg.train)?;
    eprintln!(
        "probe trained {} epochs: test accuracy {:.2}, TPR gap {:.2}, MCDP gap {:.2}",
        out.trajectory.len(),
        report.accuracy,
        report.tpr_gap,
        report.mcdp_gap
    );
    Ok(CommandOutput::ok(metrics_json(&report, Some(cfg.hash()))?))
}

/// Worker cap from `DFL_THREADS`, else the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("DFL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Serialize)]
struct SweepRow {
    alpha: f64,
    seed: u64,
    val_accuracy: f64,
    val_tpr_gap: f64,
    val_mcdp_gap: f64,
    gap_score: f64,
    passed: bool,
}

/// Trains the Standard baseline and one model per alpha, then selects.
/// Writes `sweep.csv` and `selection.json`. Exits 1 when no candidate
/// passes the accuracy filter.
pub fn sweep(cfg: &RunConfig, alphas: &[f64]) -> Result<CommandOutput, CliError> {
    if alphas.is_empty() {
        return Err(CliError::Config("no alpha candidates".into()));
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.resolved"), cfg.resolved_text().as_bytes())?;
    let splits = load_splits(cfg)?;
    let baseline = training::train_standard(&splits, cfg.hidden, &cfg.train)?;
    let base_report = evaluate_model(&baseline.model, &splits.val, EvalOptions::default())?;
    let spec = cfg.network_spec(splits.train.p(), splits.train.k);
    let (sel, _) = training::select_alpha(alphas, &splits, spec, &cfg.train, base_report.accuracy, thread_budget())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for (c, passed) in sel.candidates.iter().zip(&sel.passed) {
        w.serialize(SweepRow {
            alpha: c.alpha,
            seed: c.seed,
            val_accuracy: c.val_accuracy,
            val_tpr_gap: c.val_tpr_gap,
            val_mcdp_gap: c.val_mcdp_gap,
            gap_score: c.gap_score(),
            passed: *passed,
        })
        .map_err(dfl_core::Error::from)?;
    }
    let table = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&cfg.out.join("sweep.csv"), &table)?;
    let text = to_json(&json!({ "selection": sel, "config_hash": cfg.hash() }))?;
    write_file(&cfg.out.join("selection.json"), text.as_bytes())?;
    let code = if sel.flagged {
        eprintln!(
            "warning: no candidate reached {:.2}% validation accuracy; returning the most accurate (alpha {})",
            sel.threshold, sel.chosen_alpha
        );
        EXIT_WARNING
    } else {
        eprintln!("selected alpha {}", sel.chosen_alpha);
        EXIT_OK
    };
    Ok(CommandOutput { stdout: text, code })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthArgs {
    pub generator: String,
    pub n: usize,
    pub p: usize,
    pub bias: f64,
    pub noise_sd: f64,
    pub composition: String,
    pub seed: u64,
}

/// Writes a generated dataset as a matrix file plus `<out>.provenance.json`.
pub fn synth(args: &SynthArgs, out: &Path) -> Result<CommandOutput, CliError> {
    let ds = match args.generator.as_str() {
        "toy" => gen_toy_sdr(args.n, args.noise_sd, args.seed)?,
        "biased" => {
            let comp = match args.composition.as_str() {
                "biased" => BIASED_COMPOSITION,
                "balanced" => BALANCED_COMPOSITION,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown composition {other:?} (expected biased or balanced)"
                    )))
                }
            };
            gen_biased_with_composition(args.n, args.p, args.bias, args.seed, comp)?
        }
        other => return Err(CliError::Config(format!("unknown generator {other:?} (expected toy or biased)"))),
    };
    let mut bytes = Vec::new();
    write_matrix(&ds, &mut bytes)?;
    write_file(out, &bytes)?;
    let prov_path = PathBuf::from(format!("{}.provenance.json", out.display()));
    let text = to_json(&json!({
        "format": "DFLMAT v1",
        "n": ds.n(),
        "p": ds.p(),
        "d": ds.d(),
        "k": ds.k,
        "provenance": ds.provenance,
    }))?;
    write_file(&prov_path, text.as_bytes())?;
    Ok(CommandOutput::ok(text))
}

/// Reads a header-less numeric CSV into a sample matrix.
pub fn read_numeric_csv(path: &Path) -> Result<SampleMatrix, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(dfl_core::Error::from)?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| CliError::Config(format!("{}: row {i}: {v:?} is not a number", path.display())))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(SampleMatrix::from_rows(&rows)?)
}

fn read_labels(path: &Path) -> Result<Vec<usize>, CliError> {
    let m = read_numeric_csv(path)?;
    if m.d() != 1 {
        return Err(CliError::Config(format!("{}: labels need one column", path.display())));
    }
    m.values()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::Config(format!("{}: {v} is not a class label", path.display())))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DcovArgs {
    pub naive: bool,
    pub fast: bool,
    pub conditional: bool,
    pub y: Option<PathBuf>,
    pub classes: Option<usize>,
}

/// Distance covariance estimates between two header-less numeric CSVs.
pub fn dcov(x_path: &Path, z_path: &Path, args: &DcovArgs) -> Result<CommandOutput, CliError> {
    let x = read_numeric_csv(x_path)?;
    let z = read_numeric_csv(z_path)?;
    let fast = args.fast || !(args.naive || args.conditional);
    let mut out = serde_json::Map::new();
    out.insert("n".into(), json!(x.n()));
    let mut fast_value = None;
    let mut naive_value = None;
    if fast {
        let e = dc_fast(&z, &x)?;
        fast_value = Some(e.value);
        out.insert("fast".into(), json!(e.value));
    }
    if args.naive {
        let e = dc_naive(&z, &x)?;
        naive_value = Some(e.value);
        out.insert("naive".into(), json!(e.value));
    }
    if let (Some(f), Some(n)) = (fast_value, naive_value) {
        out.insert("difference".into(), json!(f - n));
    }
    if args.conditional {
        let y_path = args
            .y
            .as_ref()
            .ok_or_else(|| CliError::Config("--conditional needs --y".into()))?;
        let y = read_labels(y_path)?;
        let k = args
            .classes
            .unwrap_or_else(|| y.iter().max().map_or(1, |m| m + 1));
        let c = dc_conditional(&z, &x, &y, k)?;
        let per_class: Vec<_> = c
            .per_class
            .iter()
            .map(|t| json!({"class": t.class, "n_k": t.n_k, "weight": t.weight, "estimate": t.estimate}))
            .collect();
        out.insert(
            "conditional".into(),
            json!({"value": c.value, "per_class": per_class, "skipped_classes": c.skipped_classes}),
        );
    }
    Ok(CommandOutput::ok(to_json(&serde_json::Value::Object(out))?))
}

/// Audits a prediction CSV: a header row, then per sample `classes`
/// probability columns, the true label, and the sensitive columns.
pub fn audit(path: &Path, classes: usize, columns: &[usize]) -> Result<CommandOutput, CliError> {
    if classes < 2 {
        return Err(CliError::Config("--classes must be at least 2".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut sensitive = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(dfl_core::Error::from)?;
        let vals = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| CliError::Config(format!("{}: row {i}: {v:?} is not a number", path.display())))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if vals.len() < classes + 2 {
            return Err(CliError::Config(format!(
                "{}: row {i} has {} columns; need {classes} probabilities, a label and at least one sensitive column",
                path.display(),
                vals.len()
            )));
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(CliError::Config(format!("{}: row {i} has a different column count", path.display())));
        }
        probs.extend_from_slice(&vals[..classes]);
        let label = vals[classes];
        if !(label >= 0.0 && label.fract() == 0.0) {
            return Err(CliError::Config(format!("{}: row {i}: label {label} is not a class", path.display())));
        }
        labels.push(label as usize);
        sensitive.extend_from_slice(&vals[classes + 1..]);
    }
    let n = labels.len();
    if n == 0 {
        return Err(CliError::Config(format!("{}: no rows", path.display())));
    }
    let d = sensitive.len() / n;
    let preds = PredictionSet::new(classes, probs, labels, SampleMatrix::new(n, d, sensitive)?)?;
    let report = audit_predictions(&preds, columns)?;
    Ok(CommandOutput::ok(metrics_json(&report, None)?))
}
