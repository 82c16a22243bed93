// SPDX-License-Identifier: MIT OR Apache-2.0

//! `knowprobe` command line.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use knowprobe::calibration::{CalibrationResult, Ecdf};
use knowprobe::config::{load_thresholds, save_thresholds, RunConfig};
use knowprobe::dataset::{
    filter_split, generate_synthetic_fixture, load_dataset, save_dataset, SCHEMA_VERSION,
};
use knowprobe::pipeline::Split;
use knowprobe::{
    evaluate, ClassificationOutcome, Evaluation, ReasoningLabel, Thresholds, Workflow,
};

#[derive(Parser)]
#[command(
    name = "knowprobe",
    version,
    about = "Hallucination reasoning with knowledge and alignment tests"
)]
struct Cli {
    /// TOML run configuration. `KNOWPROBE_*` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic labeled fixture as JSONL.
    Fixture {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose tau and theta on labeled validation data.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Classify every example and write one outcome per line.
    Classify {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON file with `tau` and `theta`; falls back to the config.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Defaults to `<output dir>/outcomes.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate outcomes against the dataset labels and write the tables.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the evaluation tables to stdout.
    Report {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Validation,
    Test,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::All => None,
            SplitArg::Validation => Some(Split::Validation),
            SplitArg::Test => Some(Split::Test),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

/// Bad invocation rather than a failed run; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(path) = &cli.config {
        require_file(path)?;
    }
    let mut config = RunConfig::load(cli.config.as_deref()).context("loading configuration")?;
    match cli.command {
        Command::Fixture { seed, out } => {
            let examples = generate_synthetic_fixture(seed);
            create_parent(&out)?;
            save_dataset(&out, &examples)?;
            println!("wrote {} examples to {}", examples.len(), out.display());
            Ok(())
        }
        Command::Calibrate {
            dataset,
            split,
            out_dir,
        } => {
            if let Some(dir) = out_dir {
                config.output.dir = dir;
            }
            calibrate(&config, &dataset, split)
        }
        Command::Classify {
            dataset,
            thresholds,
            split,
            out,
        } => {
            let thresholds = match thresholds {
                Some(path) => {
                    require_file(&path)?;
                    load_thresholds(&path).with_context(|| format!("reading {}", path.display()))?
                }
                None => config.thresholds().ok_or_else(|| {
                    usage(
                        "thresholds missing: pass --thresholds or set tau and theta in the config",
                    )
                })?,
            };
            let out = out.unwrap_or_else(|| config.output.dir.join("outcomes.jsonl"));
            classify(&config, &dataset, split, &thresholds, &out)
        }
        Command::Evaluate {
            dataset,
            outcomes,
            out_dir,
        } => {
            if let Some(dir) = out_dir {
                config.output.dir = dir;
            }
            let evaluation = load_evaluation(&dataset, &outcomes)?;
            let dir = &config.output.dir;
            fs::create_dir_all(dir)?;
            write_json(
                &dir.join("evaluation.json"),
                &evaluation_document(&config, &evaluation),
            )?;
            fs::write(dir.join("confusion.csv"), evaluation.matrix.to_csv())?;
            print!("{}", render_tables(&evaluation));
            Ok(())
        }
        Command::Report {
            dataset,
            outcomes,
            format,
        } => {
            let evaluation = load_evaluation(&dataset, &outcomes)?;
            let mut stdout = std::io::stdout().lock();
            match format {
                ReportFormat::Json => {
                    let doc = evaluation_document(&config, &evaluation);
                    writeln!(stdout, "{}", serde_json::to_string_pretty(&doc)?)?;
                }
                ReportFormat::Csv => write!(stdout, "{}", evaluation.matrix.to_csv())?,
            }
            Ok(())
        }
    }
}

fn read_examples(path: &Path, split: SplitArg) -> anyhow::Result<Vec<knowprobe::LabeledExample>> {
    require_file(path)?;
    let examples = load_dataset(path)?;
    Ok(filter_split(&examples, split.split()))
}

#[derive(Serialize)]
struct CalibrationDocument<'a> {
    schema: u32,
    config: &'a RunConfig,
    split: &'a str,
    examples: usize,
    thresholds: Thresholds,
    summary: String,
    knowledge: &'a CalibrationResult,
    skipped: &'a [String],
}

fn calibrate(config: &RunConfig, dataset: &Path, split: SplitArg) -> anyhow::Result<()> {
    let examples = read_examples(dataset, split)?;
    if examples.is_empty() {
        return Err(anyhow!("no examples in the selected split"));
    }
    let model = config.build_model()?;
    let tagger = config.build_tagger()?;
    let attention = config.attention();
    let workflow = Workflow {
        model: model.as_ref(),
        tagger: tagger.as_ref(),
        probe: &config.probe,
        attention: &attention,
        alignment: &config.alignment,
    };
    let cal = workflow.calibrate(&examples)?;
    let thresholds = cal.thresholds();

    let dir = &config.output.dir;
    fs::create_dir_all(dir)?;
    save_thresholds(dir.join("thresholds.json"), &thresholds)?;
    let doc = CalibrationDocument {
        schema: SCHEMA_VERSION,
        config,
        split: split_name(split),
        examples: examples.len(),
        thresholds,
        summary: cal.knowledge.summary(),
        knowledge: &cal.knowledge,
        skipped: &cal.skipped,
    };
    write_json(&dir.join("calibration.json"), &doc)?;
    fs::write(
        dir.join("ecdf_fabricated.csv"),
        Ecdf::new(&cal.fabricated_scores)?.to_csv(),
    )?;
    fs::write(
        dir.join("ecdf_other.csv"),
        Ecdf::new(&cal.other_scores)?.to_csv(),
    )?;

    println!("knowledge test: {}", cal.knowledge.summary());
    if cal.knowledge.small_sample {
        println!("warning: fewer than 10 scores in a group; the p-value is unreliable");
    }
    println!("tau = {}", thresholds.tau);
    println!("theta = {}", thresholds.theta);
    if !cal.skipped.is_empty() {
        println!("skipped {} unscorable examples", cal.skipped.len());
    }
    Ok(())
}

fn classify(
    config: &RunConfig,
    dataset: &Path,
    split: SplitArg,
    thresholds: &Thresholds,
    out: &Path,
) -> anyhow::Result<()> {
    let examples = read_examples(dataset, split)?;
    let model = config.build_model()?;
    let tagger = config.build_tagger()?;
    let attention = config.attention();
    let workflow = Workflow {
        model: model.as_ref(),
        tagger: tagger.as_ref(),
        probe: &config.probe,
        attention: &attention,
        alignment: &config.alignment,
    };
    let mut body = serde_json::to_string(&json!({
        "schema": SCHEMA_VERSION,
        "config": config,
        "thresholds": thresholds,
    }))?;
    body.push('\n');
    let mut unclassifiable = 0;
    for ex in &examples {
        let outcome = workflow
            .classify(ex, thresholds)
            .with_context(|| format!("classifying {}", ex.id))?;
        if outcome.reason.is_some() {
            unclassifiable += 1;
        }
        body.push_str(&serde_json::to_string(&outcome)?);
        body.push('\n');
    }
    create_parent(out)?;
    fs::write(out, body)?;
    println!(
        "classified {} examples into {}",
        examples.len(),
        out.display()
    );
    if unclassifiable > 0 {
        println!("{unclassifiable} examples were unclassifiable");
    }
    Ok(())
}

fn load_outcomes(path: &Path) -> anyhow::Result<Vec<ClassificationOutcome>> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    let mut outcomes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        if i == 0 && value.get("schema").is_some() {
            continue;
        }
        let outcome = serde_json::from_value(value)
            .with_context(|| format!("{}:{}: invalid outcome", path.display(), i + 1))?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn load_evaluation(dataset: &Path, outcomes: &Path) -> anyhow::Result<Evaluation> {
    let outcomes = load_outcomes(outcomes)?;
    let examples = read_examples(dataset, SplitArg::All)?;
    let ids: std::collections::HashSet<&str> = outcomes.iter().map(|o| o.id.as_str()).collect();
    let covered: Vec<_> = examples
        .into_iter()
        .filter(|e| ids.contains(e.id.as_str()))
        .collect();
    Ok(evaluate(&covered, &outcomes)?)
}

fn evaluation_document(config: &RunConfig, evaluation: &Evaluation) -> serde_json::Value {
    json!({
        "schema": SCHEMA_VERSION,
        "config": config,
        "evaluation": evaluation,
    })
}

fn render_tables(e: &Evaluation) -> String {
    let mut s = String::new();
    let pct = &e.column_percentages;
    let _ = writeln!(
        s,
        "{:<12}{:>12}{:>12}{:>12}",
        "pred\\actual", "aligned", "misaligned", "fabricated"
    );
    for predicted in ReasoningLabel::ALL {
        let p = predicted.index();
        let _ = writeln!(
            s,
            "{:<12}{:>11.2}%{:>11.2}%{:>11.2}%",
            predicted.as_str(),
            pct[p][0],
            pct[p][1],
            pct[p][2]
        );
    }
    let u = e.unclassifiable;
    if u.iter().any(|&n| n > 0) {
        let _ = writeln!(
            s,
            "{:<12}{:>12}{:>12}{:>12}",
            "unclassif.", u[0], u[1], u[2]
        );
    }
    let b = &e.binary;
    let _ = writeln!(
        s,
        "binary accuracy: aligned {:.2}%, misaligned {:.2}%, fabricated {:.2}%, overall {:.2}%",
        b.aligned, b.misaligned, b.fabricated, b.overall
    );
    s
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::All => "all",
        SplitArg::Validation => "validation",
        SplitArg::Test => "test",
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
