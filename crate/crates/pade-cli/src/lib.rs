//! Command-line front end. Every subcommand except `serve` talks to the
//! HTTP service: either the one named by `--server`, or an in-process
//! server started on an ephemeral localhost port for the duration of the
//! command.
//!
//! Success output is machine-parseable (JSON by default, CSV for
//! `analyze --csv`); diagnostics go to stderr. Exit codes: 0 success,
//! 1 usage error, 2 data/validation/transport error.

use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pade_client::{ClientError, PadeClient};
use pade_core::api::{
    AnalyzeOptions, AnalyzeReport, DemoRequest, InterveneOptions, PadLayerMode, PadOptions,
    SimulateRequest,
};
use pade_core::intervention::TargetLayer;
use pade_core::metrics::{BinaryOutcome, CaptionRecord};
use pade_core::synth::ScenarioConfig;

#[derive(Debug, Parser)]
#[command(
    name = "pade",
    version,
    about = "Attention-dynamics extraction and logit-level intervention over attention traces",
    long_about = "Analyze multi-head attention traces (binary PADT v1 files), extract positive \
                  attention dynamics, apply the logit-level intervention, run synthetic recovery \
                  benchmarks and score hallucination metrics. Subcommands run against a service \
                  instance; without --server a private one is started for the command."
)]
pub struct Cli {
    /// Base URL of a running service (e.g. http://127.0.0.1:8787);
    /// when absent, an in-process server is used.
    #[arg(long, global = true)]
    pub server: Option<String>,

    /// Seed for seeded subcommands.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Emit JSON (the default).
    #[arg(long, global = true, conflicts_with = "csv")]
    pub json: bool,

    /// Emit flat CSV (analyze only).
    #[arg(long, global = true)]
    pub csv: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Token-group ratios, sink report and dynamics maps for a trace.
    Analyze(AnalyzeArgs),
    /// Positive-dynamics map for one step of a trace.
    Pad(PadArgs),
    /// Apply the attention intervention to a recorded trace.
    Intervene(InterveneArgs),
    /// Seeded synthetic recovery experiment.
    Simulate(SimulateArgs),
    /// Hallucination metrics over JSON-lines records.
    Metrics(MetricsArgs),
    /// Seeded end-to-end toy-model run (model, trace, dynamics, hooked rerun).
    Demo(DemoArgs),
    /// Run the HTTP service in the foreground.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Trace file (binary PADT v1).
    #[arg(long)]
    pub trace: PathBuf,
    /// Step to analyze (default 0).
    #[arg(long)]
    pub step: Option<usize>,
    /// Sink threshold as a multiple of uniform attention (default 5).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Layers a position must exceed the threshold in (default: half, rounded up).
    #[arg(long)]
    pub min_layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PadArgs {
    /// Trace file (binary PADT v1).
    #[arg(long)]
    pub trace: PathBuf,
    /// Step to extract (default 0).
    #[arg(long)]
    pub step: Option<usize>,
    /// Scale the map so its peak is 1.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PadLayersArg {
    /// Use every layer of the recorded pass.
    All,
    /// Use only the layers below the target (what a live hook sees).
    Below,
}

impl From<PadLayersArg> for PadLayerMode {
    fn from(arg: PadLayersArg) -> Self {
        match arg {
            PadLayersArg::All => PadLayerMode::All,
            PadLayersArg::Below => PadLayerMode::Below,
        }
    }
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    /// Intervention strength.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Target layer: "last" or a 1-based index.
    #[arg(long, default_value = "last")]
    pub layer: TargetLayer,
    /// Disable per-head MAD scaling.
    #[arg(long)]
    pub no_mad: bool,
    /// Disable system-token compensation.
    #[arg(long)]
    pub no_stc: bool,
    /// Trace file (binary PADT v1).
    #[arg(long)]
    pub trace: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to one step (default: all steps).
    #[arg(long)]
    pub step: Option<usize>,
    /// Layers feeding the dynamics map.
    #[arg(long, value_enum, default_value_t = PadLayersArg::All)]
    pub pad_layers: PadLayersArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of seeds to evaluate.
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    /// Top-k for precision (default: planted core size).
    #[arg(long)]
    pub k: Option<usize>,
    /// Scenario config JSON (fields default to the shipped configuration).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(subcommand)]
    pub kind: MetricsKind,
}

#[derive(Debug, Subcommand)]
pub enum MetricsKind {
    /// Caption object-hallucination rates. Input: JSON lines of
    /// {"mentioned": [...], "ground_truth": [...]}.
    Chair {
        /// Input path; stdin when absent or "-".
        input: Option<PathBuf>,
    },
    /// Yes/no object-existence scores. Input: JSON lines of
    /// {"pred": "yes"|"no", "label": "yes"|"no"}.
    Pope {
        /// Input path; stdin when absent or "-".
        input: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Generation steps.
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    /// Intervention strength for the hooked rerun.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Also write the unintervened trace as a PADT file.
    #[arg(long)]
    pub emit_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8787")]
    pub addr: SocketAddr,
}

/// Failures after successful argument parsing.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 1: the invocation itself is wrong.
    Usage(String),
    /// Exit code 2: data, validation or transport failure.
    Failure(String),
}

impl From<ClientError> for CliError {
    fn from(err: ClientError) -> Self {
        CliError::Failure(err.to_string())
    }
}

type CliResult = Result<(), CliError>;

pub async fn run(cli: Cli) -> CliResult {
    let Cli {
        server,
        seed,
        csv,
        command,
        ..
    } = cli;

    if csv && !matches!(command, Command::Analyze(_)) {
        return Err(CliError::Usage(
            "--csv is only supported by the analyze subcommand".into(),
        ));
    }

    if let Command::Serve(args) = command {
        return serve(args).await;
    }

    let base = match server {
        Some(url) => url,
        None => pade_server::spawn_ephemeral()
            .await
            .map_err(|e| CliError::Failure(format!("failed to start in-process server: {e}")))?,
    };
    let client = PadeClient::new(base);

    match command {
        Command::Analyze(args) => analyze(&client, args, csv).await,
        Command::Pad(args) => pad(&client, args).await,
        Command::Intervene(args) => intervene(&client, args).await,
        Command::Simulate(args) => simulate(&client, args).await,
        Command::Metrics(args) => metrics(&client, args).await,
        Command::Demo(args) => demo(&client, args, seed).await,
        Command::Serve(_) => unreachable!("handled above"),
    }
}

async fn serve(args: ServeArgs) -> CliResult {
    let listener = tokio::net::TcpListener::bind(args.addr)
        .await
        .map_err(|e| CliError::Failure(format!("bind {}: {e}", args.addr)))?;
    let bound = listener
        .local_addr()
        .map_err(|e| CliError::Failure(e.to_string()))?;
    eprintln!("listening on http://{bound}");
    pade_server::serve(listener)
        .await
        .map_err(|e| CliError::Failure(e.to_string()))
}

fn read_trace_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Failure(format!("serialization: {e}")))?;
    println!("{text}");
    Ok(())
}

async fn analyze(client: &PadeClient, args: AnalyzeArgs, csv: bool) -> CliResult {
    let trace = read_trace_file(&args.trace)?;
    let opts = AnalyzeOptions {
        step: args.step,
        tau: args.tau,
        min_layers: args.min_layers,
    };
    let report = client.analyze(trace, &opts).await?;
    if csv {
        print!("{}", analyze_csv(&report));
        Ok(())
    } else {
        print_json(&report)
    }
}

/// Long-format CSV: one value per line, keyed by series, layer and
/// position (layer is 1-based; empty fields are not applicable).
fn analyze_csv(report: &AnalyzeReport) -> String {
    let mut out = String::from("series,layer,position,value\n");
    for (l, ratios) in report.ratios.iter().enumerate() {
        let layer = l + 1;
        for (name, value) in [
            ("ratio.system", ratios.system),
            ("ratio.vision", ratios.vision),
            ("ratio.instruction", ratios.instruction),
            ("ratio.output", ratios.output),
        ] {
            out.push_str(&format!("{name},{layer},,{value}\n"));
        }
    }
    for (j, value) in report.pad.iter().enumerate() {
        out.push_str(&format!("pad,,{j},{value}\n"));
    }
    for (j, value) in report.static_mean.iter().enumerate() {
        out.push_str(&format!("static,,{j},{value}\n"));
    }
    for sink in &report.sinks.sinks {
        out.push_str(&format!("sink,,{},{}\n", sink.position, sink.mean_attention));
    }
    for (l, row) in report.attention.iter().enumerate() {
        let layer = l + 1;
        for (j, value) in row.iter().enumerate() {
            out.push_str(&format!("attention,{layer},{j},{value}\n"));
        }
    }
    out
}

async fn pad(client: &PadeClient, args: PadArgs) -> CliResult {
    let trace = read_trace_file(&args.trace)?;
    let opts = PadOptions {
        step: args.step,
        normalize: Some(args.normalize),
    };
    let map = client.pad(trace, &opts).await?;
    print_json(&map)
}

async fn intervene(client: &PadeClient, args: InterveneArgs) -> CliResult {
    let trace = read_trace_file(&args.trace)?;
    let opts = InterveneOptions {
        lambda: Some(args.lambda),
        layer: Some(args.layer.to_string()),
        mad: Some(!args.no_mad),
        stc: Some(!args.no_stc),
        step: args.step,
        pad_layers: Some(args.pad_layers.into()),
    };
    let report = client.intervene(trace, &opts).await?;
    match &args.out {
        Some(path) => {
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::Failure(format!("serialization: {e}")))?;
            std::fs::write(path, text + "\n")
                .map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
        }
        None => print_json(&report),
    }
}

async fn simulate(client: &PadeClient, args: SimulateArgs) -> CliResult {
    let config: Option<ScenarioConfig> = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let aggregate = client
        .simulate(&SimulateRequest {
            config,
            seeds: args.seeds,
            k: args.k,
        })
        .await?;
    print_json(&aggregate)
}

fn read_lines(input: Option<&Path>) -> Result<String, CliError> {
    match input {
        Some(path) if path.as_os_str() != "-" => std::fs::read_to_string(path)
            .map_err(|e| CliError::Failure(format!("{}: {e}", path.display()))),
        _ => {
            let mut text = String::new();
            std::io::stdin()
                .read_to_string(&mut text)
                .map_err(|e| CliError::Failure(format!("stdin: {e}")))?;
            Ok(text)
        }
    }
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, CliError> {
    let mut records = Vec::new();
    for (number, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line)
                .map_err(|e| CliError::Failure(format!("line {}: {e}", number + 1)))?,
        );
    }
    Ok(records)
}

async fn metrics(client: &PadeClient, args: MetricsArgs) -> CliResult {
    match args.kind {
        MetricsKind::Chair { input } => {
            let text = read_lines(input.as_deref())?;
            let records: Vec<CaptionRecord> = parse_jsonl(&text)?;
            let report = client.metrics_chair(&records).await?;
            print_json(&report)
        }
        MetricsKind::Pope { input } => {
            let text = read_lines(input.as_deref())?;
            let outcomes: Vec<BinaryOutcome> = parse_jsonl(&text)?;
            let scores = client.metrics_pope(&outcomes).await?;
            print_json(&scores)
        }
    }
}

async fn demo(client: &PadeClient, args: DemoArgs, seed: u64) -> CliResult {
    let request = DemoRequest {
        seed,
        steps: args.steps,
        lambda: args.lambda,
    };
    if let Some(path) = &args.emit_trace {
        let bytes = client.demo_trace(&request).await?;
        std::fs::write(path, bytes)
            .map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?;
    }
    let report = client.demo(&request).await?;
    print_json(&report)
}
