//! `miaaudit`: run the audit pipeline, sweep a memorization dial, or print a
//! saved report.
//!
//! Exit status is 0 on success, 2 for a malformed config or report, 3 when
//! training diverges, and 1 for anything else (I/O, degenerate splits).

use clap::{Parser, Subcommand};
use miaaudit_core::config::ExperimentConfig;
use miaaudit_core::evalstat::{BinomialResult, EvalReport};
use miaaudit_core::pipeline;
use miaaudit_core::Error;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "miaaudit",
    version,
    about = "White-box membership-inference audit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline described by a config file.
    Run { config: PathBuf },
    /// Run the pipeline once per dial value and tabulate the results.
    Sweep {
        config: PathBuf,
        /// Comma-separated dial values.
        #[arg(long, value_delimiter = ',', required = true)]
        dial: Vec<String>,
        /// Config key the dial sets.
        #[arg(long, default_value = "target.epochs")]
        dial_key: String,
    },
    /// Print a saved report as text tables.
    Report { report: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input() {
        2
    } else if e.is_numerical() {
        3
    } else {
        1
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        line: 0,
        field: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut config = ExperimentConfig::parse(&text)?;
    if let Some(dir) = std::env::var_os("MIAAUDIT_OUT") {
        config.output_dir = PathBuf::from(dir);
    }
    Ok(config)
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn opt4(v: Option<f64>) -> String {
    v.map(fmt4).unwrap_or_else(|| "n/a".into())
}

fn render(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("label mode       {}\n", report.label_mode.name()));
    out.push_str(&format!("feature config   {}\n", report.feature_config));
    out.push_str(&format!("threshold        {}\n", fmt4(report.threshold)));
    out.push_str(&format!(
        "target MSE       train {}  held-out {}\n",
        opt4(report.target_train_mse),
        opt4(report.target_heldout_mse)
    ));
    out.push_str(&format!(
        "attack epoch     {} (of {})\n\n",
        report.attack_best_epoch,
        report.attack_history.len().saturating_sub(1)
    ));

    out.push_str(&format!(
        "{:<14}{:>6}{:>9}{:>9}{:>9}{:>9}{:>11}\n",
        "split", "n", "Acc", "F1", "AUC", "AP", "frame BCE"
    ));
    for s in &report.splits {
        out.push_str(&format!(
            "{:<14}{:>6}{:>9}{:>9}{:>9}{:>9}{:>11}\n",
            s.split,
            s.recordings,
            fmt4(s.accuracy),
            fmt4(s.f1),
            opt4(s.auc),
            opt4(s.average_precision),
            fmt4(s.frame_bce)
        ));
    }
    out.push_str(&format!(
        "\ntest ROC AUC {}   AP {}   ({} ROC points, {} PR points)\n\n",
        fmt4(report.auc),
        fmt4(report.average_precision),
        report.roc_points.len(),
        report.pr_points.len()
    ));

    out.push_str("multi-recording participants, recordings outside target training\n");
    out.push_str(&format!(
        "{:<14}{:>7}{:>11}{:>14}{:>14}{:>10}{:>9}{:>18}\n",
        "split", "total", "predicted", "one-sided p", "two-sided p", "1-p", "AUC", "null band"
    ));
    for b in &report.cross_label {
        match b.binomial {
            Some(BinomialResult {
                one_sided_p,
                two_sided_p,
                one_minus_two_sided_p,
                ..
            }) => {
                let band = b
                    .null_band
                    .map(|(lo, hi)| format!("[{}, {}]", fmt4(lo), fmt4(hi)))
                    .unwrap_or_else(|| "n/a".into());
                out.push_str(&format!(
                    "{:<14}{:>7}{:>11}{:>14}{:>14}{:>10}{:>9}{:>18}\n",
                    b.split,
                    b.total,
                    b.predicted_member,
                    fmt4(one_sided_p),
                    fmt4(two_sided_p),
                    fmt4(one_minus_two_sided_p),
                    opt4(b.auc_vs_nonmembers),
                    band
                ));
            }
            None => out.push_str(&format!("{:<14}{:>7}  n/a\n", b.split, b.total)),
        }
    }
    out
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config } => {
            let config = load_config(&config)?;
            let outcome = pipeline::run(&config, &config.output_dir)?;
            for r in &outcome.reports {
                emit(&format!(
                    "{:<9} test AUC {}  AP {}  Acc {}  F1 {}\n",
                    r.label_mode.name(),
                    fmt4(r.auc),
                    fmt4(r.average_precision),
                    fmt4(r.accuracy),
                    fmt4(r.f1)
                ));
            }
            emit(&format!("artifacts in {}\n", outcome.out_dir.display()));
        }
        Command::Sweep {
            config,
            dial,
            dial_key,
        } => {
            let config = load_config(&config)?;
            let rows = pipeline::sweep(&config, &dial_key, &dial, &config.output_dir)?;
            emit(&pipeline::sweep_csv(&rows));
        }
        Command::Report { report } => {
            let text = std::fs::read_to_string(&report)?;
            emit(&render(&EvalReport::from_json(&text)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("miaaudit: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
