//! `denerd`: every verb runs in process, or against a server with `--server`.

use std::future::Future;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use denerd_api::core::section::{Age, Marker};
use denerd_api::core::workbench::PipelineConfig;
use denerd_api::{ops, types::*, AnnotationWorkspace, ApiError};
use denerd_client::{Client, ClientError, ClientResult};
use denerd_service::{port_from_env, serve, AppState, ServiceError};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Api(#[from] ApiError),
    #[error("{0}")]
    Client(#[from] ClientError),
    #[error("{0}")]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Config(#[from] denerd_api::core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Parser)]
#[command(name = "denerd", version, about = "Neuron detection, atlas registration and regional density statistics")]
struct Cli {
    /// Pipeline configuration (TOML); absent keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Send requests to this server instead of running in process.
    #[arg(long, global = true, env = "DENERD_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that the backend answers.
    Health,
    /// Write synthetic data.
    #[command(subcommand)]
    Generate(Generate),
    /// Serve the HTTP API with an annotation workspace (port from DENERD_PORT).
    AnnotateServe {
        /// Directory holding `images/`.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Compact the annotations and write seeded train/test ground truth.
    ExportGt {
        /// Annotation workspace (ignored with --server).
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the detector on an annotated corpus.
    Train(TrainArgs),
    /// Detect neurons in one section image.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
    },
    /// Register a reference image onto a section.
    Register(RegisterArgs),
    /// Region densities of one section from its map and registered atlas.
    Quantify(QuantifyArgs),
    /// Group densities by age and assign cluster patterns.
    Stats {
        #[arg(long)]
        densities: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-sided rank-sum test of two samples.
    Ranksum {
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<f64>,
    },
    /// Run the pipeline over a dataset manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, train and run everything missing under a work directory.
    RunAll {
        #[arg(long)]
        work_dir: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        baselines: bool,
    },
    /// Summarize a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Generate {
    /// Annotated training tiles.
    Corpus {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sections, atlases and a manifest for three ages.
    Dataset {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with `images/` and `gt.jsonl`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long)]
    train_gt: Option<PathBuf>,
    #[arg(long)]
    test_gt: Option<PathBuf>,
    #[arg(long)]
    evaluate: bool,
    #[arg(long)]
    baselines: bool,
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    /// Section image.
    #[arg(long)]
    fixed: PathBuf,
    /// Reference image paired with the atlas.
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    recurrences: Option<usize>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, requires = "atlas_out")]
    atlas_labels: Option<PathBuf>,
    #[arg(long, requires = "atlas_labels")]
    atlas_out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantifyArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    #[arg(long)]
    section: String,
    #[arg(long, value_parser = parse_age)]
    age: Age,
    #[arg(long, value_parser = parse_marker, default_value = "GAD1")]
    marker: Marker,
    #[arg(long)]
    parents: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_age(s: &str) -> Result<Age, String> {
    s.parse().map_err(|e: denerd_api::core::Error| e.to_string())
}

fn parse_marker(s: &str) -> Result<Marker, String> {
    s.parse().map_err(|e: denerd_api::core::Error| e.to_string())
}

enum Backend {
    Local,
    Remote(Client, tokio::runtime::Runtime),
}

impl Backend {
    fn exec<T, F, Fut>(&self, local: impl FnOnce() -> Result<T, ApiError>, remote: F) -> Result<T, CliError>
    where
        F: FnOnce(Client) -> Fut,
        Fut: Future<Output = ClientResult<T>>,
    {
        match self {
            Backend::Local => Ok(local()?),
            Backend::Remote(c, rt) => Ok(rt.block_on(remote(c.clone()))?),
        }
    }

    fn is_remote(&self) -> bool {
        matches!(self, Backend::Remote(..))
    }
}

/// Remote servers resolve paths against their own directory, so send
/// absolute ones.
fn abs(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn abs_opt(p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_deref().map(abs)
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| CliError::Usage(e.to_string()))?);
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    config.validate()?;
    let backend = match &cli.server {
        Some(url) => Backend::Remote(Client::new(url), runtime()?),
        None => Backend::Local,
    };

    match cli.command {
        Command::Health => print_json(&backend.exec(|| Ok(ops::health()), |c| async move { c.health().await })?),
        Command::Generate(Generate::Corpus { count, out }) => {
            let req = GenerateCorpusRequest {
                spec: config.corpus.clone(),
                count: count.unwrap_or(config.corpus_size),
                out_dir: abs(&out),
            };
            let r = &req;
            print_json(&backend.exec(|| ops::generate_corpus(&req), |c| async move { c.generate_corpus(r).await })?)
        }
        Command::Generate(Generate::Dataset { out }) => {
            let req = GenerateDatasetRequest {
                spec: config.dataset.clone(),
                out_dir: abs(&out),
            };
            let r = &req;
            print_json(&backend.exec(|| ops::generate_dataset(&req), |c| async move { c.generate_dataset(r).await })?)
        }
        Command::AnnotateServe { dir } => {
            if backend.is_remote() {
                return Err(CliError::Usage("annotate-serve starts a server; drop --server".into()));
            }
            let state = AppState::with_workspace(&dir)?;
            let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port_from_env()?));
            eprintln!("serving {} on http://{addr}", dir.display());
            runtime()?.block_on(serve(addr, state))?;
            Ok(())
        }
        Command::ExportGt {
            dir,
            out,
            train_fraction,
            seed,
        } => {
            let req = ExportRequest {
                train_fraction,
                seed,
                out_dir: abs_opt(&out),
            };
            let r = &req;
            print_json(&backend.exec(|| AnnotationWorkspace::open(&dir)?.export(&req), |c| async move { c.export(r).await })?)
        }
        Command::Train(a) => {
            let req = TrainRequest {
                config,
                corpus_dir: abs(&a.corpus),
                train_gt: abs_opt(&a.train_gt),
                test_gt: abs_opt(&a.test_gt),
                model_out: abs(&a.model_out),
                evaluate: a.evaluate,
                baselines: a.baselines,
                grid: Default::default(),
                report_dir: abs_opt(&a.report_dir),
            };
            let r = &req;
            let resp = backend.exec(|| ops::train(&req), |c| async move { c.train(r).await })?;
            print_json(&TrainSummary::from(&resp))
        }
        Command::Detect { model, image, out, id } => {
            let req = DetectRequest {
                model: abs(&model),
                image: abs(&image),
                section: config.section,
                section_id: id,
                out_dir: abs_opt(&out),
            };
            let r = &req;
            print_json(&backend.exec(|| ops::detect(&req), |c| async move { c.detect(r).await })?)
        }
        Command::Register(a) => {
            let req = RegisterRequest {
                fixed: abs(&a.fixed),
                moving: abs(&a.moving),
                preprocess: config.preprocess.clone(),
                registration: config.registration.clone(),
                recurrences: a.recurrences.unwrap_or(config.recurrences),
                trace_out: abs_opt(&a.trace),
                atlas: match (a.atlas_labels, a.atlas_out) {
                    (Some(labels), Some(out)) => Some(AtlasWarpRequest {
                        labels: abs(&labels),
                        out: abs(&out),
                    }),
                    _ => None,
                },
            };
            let r = &req;
            print_json(&backend.exec(|| ops::register(&req), |c| async move { c.register(r).await })?)
        }
        Command::Quantify(a) => {
            let req = QuantifyRequest {
                map: abs(&a.map),
                labels: abs(&a.labels),
                regions: abs(&a.regions),
                atlas: config.atlas.clone(),
                section: a.section,
                age: a.age,
                marker: a.marker,
                parents: a.parents,
                out: abs_opt(&a.out),
            };
            let r = &req;
            print_json(&backend.exec(|| ops::quantify(&req), |c| async move { c.quantify(r).await })?)
        }
        Command::Stats { densities, out } => {
            let req = StatsRequest {
                densities: abs(&densities),
                stats: config.stats.clone(),
                out: abs_opt(&out),
            };
            let r = &req;
            print_json(&backend.exec(|| ops::stats(&req), |c| async move { c.stats(r).await })?)
        }
        Command::Ranksum { x, y } => {
            let req = RanksumRequest { x, y };
            let r = &req;
            print_json(&backend.exec(|| ops::ranksum(&req), |c| async move { c.ranksum(r).await })?)
        }
        Command::Run { manifest, model, out } => {
            let req = RunRequest {
                manifest: abs(&manifest),
                model: abs(&model),
                config,
                out_dir: abs(&out),
            };
            let r = &req;
            let resp = backend.exec(|| ops::run(&req), |c| async move { c.run(r).await })?;
            print!("{}", resp.summary);
            finished(&resp)
        }
        Command::RunAll {
            work_dir,
            manifest,
            model,
            baselines,
        } => {
            let req = RunAllRequest {
                config,
                work_dir: abs(&work_dir),
                manifest: abs_opt(&manifest),
                model: abs_opt(&model),
                baselines,
            };
            let r = &req;
            let resp = backend.exec(|| ops::run_all(&req), |c| async move { c.run_all(r).await })?;
            if let Some(t) = &resp.training {
                if let Some(l) = &t.learned {
                    println!("detector AP {:.4}, mean count offset {:.3}", l.average_precision, l.mean_offset());
                }
            }
            print!("{}", resp.run.summary);
            finished(&resp.run)
        }
        Command::Report { out } => {
            let req = ReportRequest { out_dir: abs(&out) };
            let r = &req;
            let resp = backend.exec(|| ops::report(&req), |c| async move { c.report(r).await })?;
            print!("{}", resp.text);
            Ok(())
        }
    }
}

fn finished(run: &RunResponse) -> Result<(), CliError> {
    if run.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} of {} sections failed", run.failures.len(), run.sections)))
    }
}

/// Training output without the per-image tables.
#[derive(Serialize)]
struct TrainSummary {
    model_path: PathBuf,
    checksum: String,
    train_images: usize,
    test_images: usize,
    final_losses: Vec<f64>,
    average_precision: Option<f64>,
    mean_offset: Option<f64>,
    baselines: Vec<(String, f64, f64)>,
}

impl From<&TrainResponse> for TrainSummary {
    fn from(r: &TrainResponse) -> Self {
        TrainSummary {
            model_path: r.model_path.clone(),
            checksum: r.checksum.clone(),
            train_images: r.train_images,
            test_images: r.test_images,
            final_losses: r.stage_losses.iter().filter_map(|s| s.last().copied()).collect(),
            average_precision: r.learned.as_ref().map(|l| l.average_precision),
            mean_offset: r.learned.as_ref().map(|l| l.mean_offset()),
            baselines: r
                .baselines
                .iter()
                .flat_map(|b| &b.reports)
                .map(|e| (e.method.clone(), e.average_precision, e.mean_offset()))
                .collect(),
        }
    }
}
