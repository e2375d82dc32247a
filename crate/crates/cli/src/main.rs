//! `ews`: validate data, generate synthetic cities, run backtests and export
//! plot data.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ews_core::data_model::{dump_epi_table, dump_tweet_table, filter_cities, load_epi_table, load_tweet_table};
use ews_core::experiment::{
    compare, generate_synthetic, parse_report_json, plot_data, report_json, write_city_csv, write_predictions_csv,
    BacktestConfig, EvalReport, PlotKind, SyntheticSpec,
};
use ews_core::{CitySeries, Error};

use manifest::{digest_file, RunManifest};

/// A failed command: exit code 2 for bad input, 1 for everything else.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn run(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::run(format!("{}: {e}", path.display()))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } | Error::Schema { .. } | Error::Config(_) | Error::Csv(_) | Error::Json(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "ews", version, about = "Dengue early-warning backtests with a tweet nowcast")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load an incidence table (and optionally a tweet table) and report coverage.
    Validate {
        epi: Option<PathBuf>,
        tweets: Option<PathBuf>,
        /// Take the data paths and filter settings from a backtest config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write synthetic incidence and tweet tables plus a matching backtest config.
    Synth {
        /// Synthetic spec (TOML); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the framework with the increased-antecedence baseline.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export plot-ready TSV from a report: diff_bars, auc_cdf or qq.
    Plotdata {
        report: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long, requires = "threshold")]
        gamma: Option<u32>,
        #[arg(long, requires = "gamma")]
        threshold: Option<f64>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { epi, tweets, config } => cmd_validate(epi, tweets, config),
        Command::Synth { config, seed, out } => cmd_synth(config.as_deref(), seed, &out),
        Command::Backtest { config, seed, jobs, out } => cmd_backtest(&config, seed, jobs, &out),
        Command::Plotdata { report, kind, gamma, threshold, out } => {
            cmd_plotdata(&report, &kind, gamma.zip(threshold), out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_cities(epi: &Path, tweets: Option<&Path>) -> Result<Vec<CitySeries>, Failure> {
    let cities = load_epi_table(epi)?;
    Ok(match tweets {
        Some(t) => load_tweet_table(t, cities)?,
        None => cities,
    })
}

fn cmd_validate(epi: Option<PathBuf>, tweets: Option<PathBuf>, config: Option<PathBuf>) -> Result<(), Failure> {
    let (epi, tweets, filter) = match config {
        Some(path) => {
            let run = config::load_run_config(&path)?;
            (run.epi_path, run.tweet_path, run.backtest)
        }
        None => {
            let epi = epi.ok_or_else(|| Failure::input("validate needs an incidence table or --config"))?;
            (epi, tweets, BacktestConfig::default())
        }
    };
    let cities = load_cities(&epi, tweets.as_deref())?;
    println!("epi: {} ({} cities)", epi.display(), cities.len());
    match &tweets {
        Some(t) => {
            let with = cities.iter().filter(|c| c.tweets().is_some()).count();
            println!("tweets: {} ({with} cities covered)", t.display());
        }
        None => println!("tweets: absent"),
    }
    let kept = filter_cities(cities.clone(), filter.min_population, filter.min_peak_level);
    for c in &cities {
        let verdict = if kept.iter().any(|k| k.city_id() == c.city_id()) { "kept" } else { "filtered" };
        println!(
            "{}\tweeks 1-{}\tpopulation {}\tpeak {}\ttweets {}\t{verdict}",
            c.city_id(),
            c.last_week(),
            c.population(),
            c.peak_level().map_or("none", |l| l.as_str()),
            if c.tweets().is_some() { "yes" } else { "no" },
        );
    }
    println!("{} of {} cities pass the filter", kept.len(), cities.len());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<(), Error>) -> Result<(), Failure> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    std::fs::write(path, buf).map_err(|e| Failure::io(path, e))
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut spec = match config {
        Some(p) => config::load_synthetic_spec(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let backtest = BacktestConfig::default();
    let cities = generate_synthetic(&spec)?;
    create_dir(out)?;
    write_with(&out.join("epi.csv"), |b| dump_epi_table(&cities, b))?;
    write_with(&out.join("tweets.csv"), |b| dump_tweet_table(&cities, b))?;
    let run = config::run_config_text("epi.csv", Some("tweets.csv"), &backtest)?;
    let run_path = out.join("backtest.toml");
    std::fs::write(&run_path, run).map_err(|e| Failure::io(&run_path, e))?;
    println!("wrote {} cities of {} weeks to {}", cities.len(), spec.weeks, out.display());
    if spec.validate_for(&backtest).is_err() {
        eprintln!("note: series are too short for the default backtest settings in backtest.toml");
    }
    Ok(())
}

fn fmt_cell(r: &EvalReport) -> String {
    match r.mean_difference {
        Some(d) => format!("{d:+.4}{}", if r.significant { "*" } else { " " }),
        None => "n/a".into(),
    }
}

fn diff_table(config: &BacktestConfig, reports: &[EvalReport]) -> String {
    let mut s = String::from("mean AUC difference, framework - baseline (* significant after Bonferroni)\n");
    let _ = write!(s, "{:>8}", "gamma");
    for t in &config.threshold_grid {
        let _ = write!(s, "{:>12}", format!("thr {t}"));
    }
    s.push('\n');
    for (gi, g) in config.gamma_grid.iter().enumerate() {
        let _ = write!(s, "{g:>8}");
        for r in &reports[gi * config.threshold_grid.len()..(gi + 1) * config.threshold_grid.len()] {
            let _ = write!(s, "{:>12}", fmt_cell(r));
        }
        s.push('\n');
    }
    s
}

fn city_file(r: &EvalReport) -> String {
    format!("gamma{}_threshold{}.csv", r.gamma, r.threshold)
}

fn run_backtest(run: &config::RunConfig, jobs: usize, out: &Path, written: &mut Vec<PathBuf>) -> Result<String, Failure> {
    let cities = load_cities(&run.epi_path, run.tweet_path.as_deref())?;
    let cmp = compare(&cities, &run.backtest, jobs)?;
    for r in &cmp.reports {
        for (city, reason) in &r.excluded {
            eprintln!("gamma {} threshold {}: excluded {city}: {reason}", r.gamma, r.threshold);
        }
    }
    let predictions = out.join("predictions.csv");
    written.push(predictions.clone());
    write_with(&predictions, |b| write_predictions_csv(&cmp.records, b))?;
    let report = out.join("report.json");
    written.push(report.clone());
    let text = report_json(&cmp.reports)?;
    std::fs::write(&report, text).map_err(|e| Failure::io(&report, e))?;
    let city_dir = out.join("cities");
    written.push(city_dir.clone());
    create_dir(&city_dir)?;
    for r in &cmp.reports {
        write_with(&city_dir.join(city_file(r)), |b| write_city_csv(r, b))?;
    }
    Ok(diff_table(&run.backtest, &cmp.reports))
}

fn cmd_backtest(config_path: &Path, seed: Option<u64>, jobs: usize, out: &Path) -> Result<(), Failure> {
    let mut run = config::load_run_config(config_path)?;
    if let Some(s) = seed {
        run.backtest.seed = s;
    }
    let mut inputs = vec![digest_file(config_path)?, digest_file(&run.epi_path)?];
    if let Some(t) = &run.tweet_path {
        inputs.push(digest_file(t)?);
    }
    create_dir(out)?;
    let manifest_path = out.join("manifest.json");
    let mut manifest = RunManifest::start(&run.backtest, inputs);
    manifest.write(&manifest_path)?;

    let mut written = Vec::new();
    let outcome = run_backtest(&run, jobs, out, &mut written);
    match outcome {
        Ok(table) => {
            manifest.finish(Ok(written));
            manifest.write(&manifest_path)?;
            print!("{table}");
            Ok(())
        }
        Err(f) => {
            for p in &written {
                let _ = if p.is_dir() { std::fs::remove_dir_all(p) } else { std::fs::remove_file(p) };
            }
            manifest.finish(Err(f.message.clone()));
            manifest.write(&manifest_path)?;
            Err(f)
        }
    }
}

fn cmd_plotdata(report: &Path, kind: &str, cell: Option<(u32, f64)>, out: Option<&Path>) -> Result<(), Failure> {
    let kind: PlotKind = kind.parse()?;
    let text = std::fs::read_to_string(report).map_err(|e| Failure::io(report, e))?;
    let reports = parse_report_json(&text)?;
    let tsv = plot_data(&reports, kind, cell)?;
    match out {
        Some(p) => std::fs::write(p, tsv).map_err(|e| Failure::io(p, e)),
        None => {
            print!("{tsv}");
            Ok(())
        }
    }
}
