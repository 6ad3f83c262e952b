use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use artgesture_client::{Client, ClientError};
use artgesture_core::api::{
    ClassDistributionRequest, ConfigRequest, DataRequest, ErrorKind, EvaluateRequest, InferRequest, JobInfo, JobStatus,
    ReportRequest, TrainRequest,
};
use artgesture_core::config::{render_key_help, DocumentFormat};
use artgesture_core::data::AnnotationSource;
use artgesture_core::evaluation::ReportFormat;
use artgesture_core::run_manifest::RunManifest;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use tracing_subscriber::EnvFilter;

/// Train, evaluate and run context-aware gesture classifiers.
///
/// Every command is sent to a gesture-server. Without --server an embedded
/// server is started for the duration of the command.
#[derive(Parser)]
#[command(name = "artgesture", version)]
struct Cli {
    /// Base URL of a running gesture-server.
    #[arg(long, global = true, env = "GESTURE_SERVER")]
    server: Option<String>,
    /// TOML or JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log filter for the embedded server and client.
    #[arg(long, global = true, env = "GESTURE_LOG", default_value = "warn")]
    log_level: String,
    /// Print raw JSON responses.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check annotation files against every dataset rule.
    ValidateData {
        /// Annotation files, each `path` or `split=path`.
        #[arg(required = true)]
        annotations: Vec<String>,
    },
    /// Per-class instance counts of one split.
    ClassDist {
        #[arg(required = true)]
        annotations: Vec<String>,
        /// Split to count (default: train.train_split).
        #[arg(long, default_value = "")]
        split: String,
        /// Keep the background category.
        #[arg(long)]
        include_background: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per seed and evaluate each on the test split.
    Train {
        #[arg(required = true)]
        annotations: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        annotations: Vec<String>,
        /// Metrics JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify person detections in a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Detections JSON; without it every whole image is classified.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Predictions file (.json or .csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate summary or metrics files into a results table.
    Report {
        /// Glob of summary.json / metrics JSON files. Repeatable.
        #[arg(long, required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config,
    /// Repeat a run from its run manifest.
    Rerun { manifest: PathBuf },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage | ErrorKind::NotFound => 2,
            ErrorKind::InvalidData => 1,
            ErrorKind::Internal => 3,
        };
        let message = match e {
            ClientError::Api { error, .. } => error.message,
            other => other.to_string(),
        };
        Failure { code, message }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure { code: 2, message: format!("{e:#}") }
    }
}

type Outcome = Result<u8, Failure>;

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn annotation_args(args: &[String]) -> Vec<String> {
    args.iter()
        .map(|a| {
            let src = AnnotationSource::parse_arg(a);
            let path = absolute(&src.path).display().to_string();
            match src.split {
                Some(split) => format!("{split}={path}"),
                None => path,
            }
        })
        .collect()
}

fn config_request(cli: &Cli) -> anyhow::Result<ConfigRequest> {
    let document = match &cli.config {
        Some(path) => Some(std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?),
        None => None,
    };
    let mut overrides = cli.overrides.clone();
    if let Some(root) = images_root_override(cli) {
        overrides.insert(0, root);
    }
    Ok(ConfigRequest { document, format: cli.config.as_deref().map(DocumentFormat::for_path), overrides })
}

/// A relative `data.images_root` given on the command line is taken relative
/// to the working directory, since the server may run elsewhere.
fn images_root_override(cli: &Cli) -> Option<String> {
    cli.overrides.iter().rev().find_map(|o| {
        let (k, v) = o.split_once('=')?;
        (k.trim() == "data.images_root" && !v.is_empty()).then(|| format!("data.images_root={}", absolute(Path::new(v)).display()))
    })
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

async fn train(client: &Client, req: TrainRequest, json: bool) -> Outcome {
    let job = client.start_training(&req).await?;
    eprintln!("job {} (run manifest {})", job.job_id, job.run_manifest.display());
    let shown = std::cell::Cell::new(0);
    let report = |info: &JobInfo| {
        for p in &info.progress[shown.get()..] {
            eprintln!(
                "seed {} epoch {:>3}  loss {:.4}  train_acc {:.3}  val_macro_f1 {:.4}  lr {:.2e}",
                p.seed, p.record.epoch, p.record.train_loss, p.record.train_accuracy, p.record.val_macro_f1, p.record.lr
            );
        }
        shown.set(info.progress.len());
    };
    let info = tokio::select! {
        r = client.wait_job(&job.job_id, Duration::from_millis(200), &report) => r?,
        _ = tokio::signal::ctrl_c() => {
            eprintln!("interrupted, cancelling job {}", job.job_id);
            client.cancel_job(&job.job_id).await?;
            client.wait_job(&job.job_id, Duration::from_millis(100), &report).await?
        }
    };
    match info.status {
        JobStatus::Succeeded => {
            let result = info.result.expect("succeeded job has a result");
            if json {
                print_json(&result);
            } else {
                for r in &result.runs {
                    let test = r.test.as_ref().map_or_else(String::new, |t| format!("  test macro-F1 {:.4}", t.macro_f1));
                    let ckpt = r.checkpoint.as_ref().map_or_else(String::new, |p| format!("  {}", p.display()));
                    println!(
                        "seed {}: best epoch {}/{}  val macro-F1 {:.4}{test}{ckpt}",
                        r.seed, r.best_epoch, r.epochs_run, r.best_val_macro_f1
                    );
                }
                if let Some(s) = &result.summary {
                    println!("{} {}: {:.1} ± {:.1} over {} runs", s.backbone, s.variant, s.mean_f1, s.std_f1, s.n_runs);
                }
            }
            Ok(0)
        }
        JobStatus::Cancelled => {
            eprintln!("training cancelled");
            Ok(130)
        }
        _ => {
            let error = info.error.expect("failed job has an error");
            Err(ClientError::Api { status: 0, error }.into())
        }
    }
}

async fn evaluate(client: &Client, req: EvaluateRequest, json: bool) -> Outcome {
    let report = client.evaluate(&req).await?;
    if json {
        print_json(&report);
    } else {
        println!(
            "{} {} on {}: macro-F1 {:.4}  accuracy {:.4}  ({} instances)",
            report.backbone, report.variant, report.split, report.macro_f1, report.accuracy, report.n_samples
        );
        if let Some(out) = &req.out {
            println!("metrics written to {}", out.display());
        }
    }
    Ok(0)
}

async fn infer(client: &Client, req: InferRequest, json: bool) -> Outcome {
    let resp = client.infer(&req).await?;
    for s in &resp.skipped {
        eprintln!("skipped {} {:?}: {}", s.image_id, s.bbox.to_array(), s.reason);
    }
    if json {
        print_json(&resp);
    } else {
        println!("{} predictions written to {}", resp.predictions.len(), resp.out.display());
    }
    Ok(0)
}

fn load_json<T: DeserializeOwned>(value: &serde_json::Value, key: &str) -> anyhow::Result<T> {
    serde_json::from_value(value.clone()).with_context(|| format!("run manifest input `{key}`"))
}

async fn rerun(client: &Client, path: &Path, json: bool) -> Outcome {
    let m = RunManifest::load(path).with_context(|| format!("reading {}", path.display()))?;
    let config = ConfigRequest::snapshot(&m.config);
    let input = |key: &str| m.inputs.get(key).cloned().unwrap_or(serde_json::Value::Null);
    match m.command.as_str() {
        "train" => {
            let req = TrainRequest {
                annotations: load_json(&input("annotations"), "annotations")?,
                out_dir: load_json(&input("out_dir"), "out_dir")?,
                config,
            };
            train(client, req, json).await
        }
        "evaluate" => {
            let req = EvaluateRequest {
                checkpoint: load_json(&input("checkpoint"), "checkpoint")?,
                annotations: load_json(&input("annotations"), "annotations")?,
                out: load_json(&input("out"), "out")?,
                config,
            };
            evaluate(client, req, json).await
        }
        "infer" => {
            let req = InferRequest {
                checkpoint: load_json(&input("checkpoint"), "checkpoint")?,
                images: load_json(&input("images"), "images")?,
                detections: load_json(&input("detections"), "detections")?,
                out: load_json(&input("out"), "out")?,
                config,
            };
            infer(client, req, json).await
        }
        other => Err(anyhow::anyhow!("cannot rerun a `{other}` manifest").into()),
    }
}

async fn run(cli: Cli, client: &Client) -> Outcome {
    let config = config_request(&cli)?;
    let json = cli.json;
    match cli.command {
        Command::ValidateData { annotations } => {
            let v = client.validate_data(&DataRequest { annotations: annotation_args(&annotations), config }).await?;
            for issue in &v.issues {
                eprintln!("{issue}");
            }
            if json {
                print_json(&v);
            } else {
                let splits: Vec<String> = v.splits.iter().map(|(k, n)| format!("{k}={n}")).collect();
                println!(
                    "{} images, {} instances, {} classes, splits: {}",
                    v.n_images,
                    v.n_instances,
                    v.labels.len(),
                    splits.join(" ")
                );
                println!("{} issue(s)", v.issues.len());
            }
            Ok(if v.issues.is_empty() { 0 } else { 1 })
        }
        Command::ClassDist { annotations, split, include_background, out } => {
            let req = ClassDistributionRequest { annotations: annotation_args(&annotations), config, split, include_background };
            let d = client.class_distribution(&req).await?;
            if json {
                print_json(&d.distribution);
            } else {
                write_or_print(out.as_deref(), &d.csv)?;
            }
            Ok(0)
        }
        Command::Train { annotations, out_dir } => {
            let req = TrainRequest { annotations: annotation_args(&annotations), out_dir: absolute(&out_dir), config };
            train(client, req, json).await
        }
        Command::Evaluate { checkpoint, annotations, out } => {
            let req = EvaluateRequest {
                checkpoint: absolute(&checkpoint),
                annotations: annotation_args(&annotations),
                out: out.as_deref().map(absolute),
                config,
            };
            evaluate(client, req, json).await
        }
        Command::Infer { checkpoint, images, detections, out } => {
            let req = InferRequest {
                checkpoint: absolute(&checkpoint),
                images: absolute(&images),
                detections: detections.as_deref().map(absolute),
                out: absolute(&out),
                config,
            };
            infer(client, req, json).await
        }
        Command::Report { inputs, format, out } => {
            let mut documents = Vec::new();
            for pattern in &inputs {
                let mut matched = 0;
                for entry in glob::glob(pattern).with_context(|| format!("bad glob {pattern:?}"))? {
                    let path = entry.context("listing report inputs")?;
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let doc = serde_json::from_str(&text).map_err(|e| Failure {
                        code: 1,
                        message: format!("{}: not valid JSON: {e}", path.display()),
                    })?;
                    documents.push(doc);
                    matched += 1;
                }
                if matched == 0 {
                    return Err(anyhow::anyhow!("no files match {pattern:?}").into());
                }
            }
            let resp = client.report(&ReportRequest { documents, format }).await?;
            write_or_print(out.as_deref(), &resp.rendered)?;
            Ok(0)
        }
        Command::Config => {
            let resolved = client.resolve_config(&config).await?;
            if json {
                print_json(&resolved.config);
            } else {
                for (k, v) in &resolved.flat {
                    println!("{k} = {v}");
                }
            }
            Ok(0)
        }
        Command::Rerun { manifest } => rerun(client, &manifest, json).await,
    }
}

/// Every `--set` in argument order. Clap keeps only the occurrences after the
/// subcommand when the flag appears on both sides of it.
fn set_flags(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        } else if a == "--set" {
            out.extend(it.next().cloned());
        } else if let Some(v) = a.strip_prefix("--set=") {
            out.push(v.to_string());
        }
    }
    out
}

fn command() -> clap::Command {
    Cli::command().after_help(format!("Config keys (set with --set KEY=VALUE or in --config):\n{}", render_key_help()))
}

#[tokio::main]
async fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let mut cli = match command().try_get_matches_from(&args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    cli.overrides = set_flags(&args);
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let client = match &cli.server {
        Some(url) => Client::new(url.clone()),
        None => match artgesture_service::spawn("127.0.0.1:0".parse().expect("address")).await {
            Ok((addr, _)) => Client::new(format!("http://{addr}")),
            Err(e) => {
                eprintln!("error: cannot start embedded server: {e}");
                return ExitCode::from(3);
            }
        },
    };
    match run(cli, &client).await {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
