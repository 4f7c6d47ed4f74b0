//! `rfcam`: generate fixtures, train surrogates, detect, retrieve, report and serve.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfcam_core::pipeline::{
    load_surrogates, read_records, read_report, run_detection, save_surrogates, train_surrogates, RECORDS_FILE,
    REPORT_FILE,
};
use rfcam_core::{fixture_gen, load_bundle, ActivationIndex, FeatureIndex, Split};
use rfcam_review::{ReviewService, ServiceError, ServiceOptions, DEFAULT_LISTEN};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "rfcam", version, about = "Find classifier decisions that rest on spurious features")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for training and detection.
    #[arg(long, global = true, value_name = "N")]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic bundle with planted spurious correlations.
    FixtureGen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train one surrogate per class and write surrogates/*.lsm.json plus metrics.json.
    Train {
        #[command(flatten)]
        run: RunDirs,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every test instance and write records.jsonl, report.json and heatmaps.
    Detect {
        #[command(flatten)]
        run: RunDirs,
        /// Flagging threshold on the dissimilarity score.
        #[arg(long)]
        theta: Option<f64>,
        /// Intensity above which heatmap pixels enter the comparison mask.
        #[arg(long, value_name = "T")]
        mask_threshold: Option<f64>,
    },
    /// Rank test instances of the same predicted class by activation of an instance's top feature.
    Retrieve {
        #[command(flatten)]
        run: RunDirs,
        #[arg(long, value_name = "ID")]
        instance: String,
        #[arg(long, value_name = "N")]
        top: Option<usize>,
    },
    /// Print per-class flag rates from report.json.
    Report {
        #[command(flatten)]
        run: RunDirs,
    },
    /// Start the review service.
    Serve {
        #[command(flatten)]
        run: RunDirs,
        #[arg(long, default_value = DEFAULT_LISTEN, value_name = "ADDR")]
        listen: String,
        /// Built review console assets served under /.
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
        /// Retrieval depth used for auto-flagging on confirm.
        #[arg(long, value_name = "N")]
        top: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct RunDirs {
    /// Tensor bundle directory (contains manifest.json).
    #[arg(long, value_name = "DIR")]
    bundle: PathBuf,
    /// Run directory for models and results. Defaults to the bundle directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunDirs {
    fn run_dir(&self) -> &Path {
        self.out.as_deref().unwrap_or(&self.bundle)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rfcam_core::Error),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl CliError {
    /// 1 for invalid input or ordering, 2 for I/O failures.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_io() => 2,
            CliError::Core(_) => 1,
            CliError::Service(e) => e.exit_code() as u8,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RFCAM_LOG", "info"))
        .format_timestamp_millis()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.parallelism.is_some() {
        cfg.parallelism = cli.parallelism;
    }
    match cli.command {
        Command::FixtureGen { seed, out } => {
            if let Some(s) = seed {
                cfg.fixture.seed = s;
            }
            cfg.validate()?;
            let (_, truth) = fixture_gen(&cfg.fixture, &out)?;
            let planted = truth.instances.iter().filter(|i| i.is_spurious_reliant).count();
            println!(
                "wrote {} instances ({} with planted spurious reliance) to {}",
                truth.instances.len(),
                planted,
                out.display()
            );
        }
        Command::Train {
            run,
            rounds,
            depth,
            lr,
            seed,
        } => {
            if let Some(v) = rounds {
                cfg.boost.num_rounds = v;
            }
            if let Some(v) = depth {
                cfg.boost.max_depth = v;
            }
            if let Some(v) = lr {
                cfg.boost.learning_rate = v;
            }
            if let Some(v) = seed {
                cfg.boost.seed = v;
            }
            cfg.validate()?;
            let bundle = load_bundle(&run.bundle)?;
            let outcome = train_surrogates(&bundle, &cfg.boost, cfg.parallelism)?;
            let dir = save_surrogates(run.run_dir(), &outcome)?;
            println!("{:>5}  {:>9}  {:>5}  {:>9}  {:>8}", "class", "available", "trees", "train_acc", "test_acc");
            for c in &outcome.metrics.classes {
                let (train, test) = match &c.metrics {
                    Some(m) => (fmt_opt(Some(m.train_accuracy)), fmt_opt(m.test_accuracy)),
                    None => ("-".into(), "-".into()),
                };
                println!("{:>5}  {:>9}  {:>5}  {:>9}  {:>8}", c.class_index, c.available, c.trees, train, test);
            }
            println!("surrogates written to {}", dir.display());
        }
        Command::Detect {
            run,
            theta,
            mask_threshold,
        } => {
            if let Some(v) = theta {
                cfg.detection.mse_threshold = v;
            }
            if let Some(v) = mask_threshold {
                cfg.detection.mask_threshold = v;
            }
            cfg.validate()?;
            let bundle = load_bundle(&run.bundle)?;
            let models = load_surrogates(run.run_dir())?;
            let (_, report) = run_detection(&bundle, &models, &cfg.detection, run.run_dir(), cfg.parallelism)?;
            println!(
                "{} records, {} correct, {} flagged, flag rate {:.3}, {} failures",
                report.total_records,
                report.correct,
                report.flagged,
                report.flag_rate,
                report.failures.len()
            );
            println!("wrote {}", run.run_dir().join(REPORT_FILE).display());
        }
        Command::Retrieve { run, instance, top } => {
            let n = top.or(cfg.top).unwrap_or(10);
            cfg.top = Some(n);
            cfg.validate()?;
            let records_path = run.run_dir().join(RECORDS_FILE);
            if !records_path.exists() {
                return Err(rfcam_core::Error::Precondition(format!(
                    "records not found at {}; run `detect` first",
                    records_path.display()
                ))
                .into());
            }
            let records = read_records(&records_path)?;
            let rec = records
                .iter()
                .find(|r| r.instance_id == instance)
                .ok_or_else(|| CliError::Usage(format!("unknown instance {instance}")))?;
            let bundle = load_bundle(&run.bundle)?;
            let index = ActivationIndex::build(&bundle)?;
            let res = index.similar_instances(
                rec.predicted_class,
                FeatureIndex(rec.top_feature),
                &instance,
                n,
                Some(Split::Test),
            )?;
            println!("query {instance}  class {}  feature {}", rec.predicted_class, rec.top_feature);
            println!("{:>4}  {:<24}  {:>10}  {:>13}  status", "rank", "instance", "activation", "dissimilarity");
            for (i, h) in res.ranked.iter().enumerate() {
                let r = records.iter().find(|r| r.instance_id == h.instance_id);
                println!(
                    "{:>4}  {:<24}  {:>10.5}  {:>13}  {}",
                    i + 1,
                    h.instance_id,
                    h.score,
                    r.map_or("-".into(), |r| format!("{:.3}", r.dissimilarity)),
                    r.map_or("-", |r| r.status.as_str())
                );
            }
        }
        Command::Report { run } => {
            cfg.validate()?;
            let path = run.run_dir().join(REPORT_FILE);
            if !path.exists() {
                return Err(rfcam_core::Error::Precondition(format!(
                    "report not found at {}; run `detect` first",
                    path.display()
                ))
                .into());
            }
            let report = read_report(&path)?;
            println!(
                "{:>5}  {:<16}  {:>7}  {:>7}  {:>7}  {:>9}  {:>8}",
                "class", "name", "records", "correct", "flagged", "flag_rate", "lsm_test"
            );
            for c in &report.per_class {
                println!(
                    "{:>5}  {:<16}  {:>7}  {:>7}  {:>7}  {:>9.3}  {:>8}",
                    c.class_index,
                    c.class_name,
                    c.records,
                    c.correct,
                    c.flagged,
                    c.flag_rate,
                    fmt_opt(c.lsm_test_accuracy)
                );
            }
            println!(
                "{:>5}  {:<16}  {:>7}  {:>7}  {:>7}  {:>9.3}  {:>8}",
                "all",
                "",
                report.total_records,
                report.correct,
                report.flagged,
                report.flag_rate,
                fmt_opt(report.lsm.macro_test_accuracy)
            );
        }
        Command::Serve {
            run,
            listen,
            static_dir,
            top,
        } => {
            if top.is_some() {
                cfg.top = top;
            }
            cfg.validate()?;
            let options = ServiceOptions {
                top_n: cfg.top.unwrap_or(ServiceOptions::default().top_n),
                static_dir,
                ..Default::default()
            };
            let service = ReviewService::open(&run.run_dir().join(RECORDS_FILE), &run.bundle, options)?;
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| rfcam_core::Error::io("tokio runtime", e))?;
            runtime.block_on(rfcam_review::serve(service, &listen))?;
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}
