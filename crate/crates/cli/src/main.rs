//! `ephys`: simulate, quantize, train, generate, evaluate and explain
//! multichannel timeseries models from the command line.
//!
//! Every subcommand takes `--config <json>` (parameters), `--seed`, `--out`
//! and `--threads`; flags override the file and the resolved parameters are
//! written to `<out>/config.resolved.json`.

mod commands;
mod config;
mod models;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use config::Common;

#[derive(Debug, Parser)]
#[command(name = "ephys", version, about = "Multichannel electrophysiology simulation, decoding and forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a state-switching oscillator recording.
    Simulate(SimulateArgs),
    /// Mu-law quantize a series into tokens.
    Quantize(QuantizeArgs),
    /// Fit an autoregressive model.
    FitAr(FitArArgs),
    /// Cross-validated decoding of an epoched dataset.
    TrainDecoder(DecodeArgs),
    /// Train on one epoched dataset and score another.
    Evaluate(DecodeArgs),
    /// Train a SimpleWavenet or quantized Wavenet forecaster.
    TrainForecaster(TrainForecasterArgs),
    /// Recursively generate from a trained forecaster.
    Generate(GenerateArgs),
    /// Posterior over task conditions from a conditioned forecaster.
    BayesDecode(BayesDecodeArgs),
    /// Fit a Gaussian HMM and summarise its state timecourse.
    FitHmm(FitHmmArgs),
    /// Welch PSD and optional Morlet wavelet power.
    EvalPsd(EvalPsdArgs),
    /// Evoked responses and their correlation with a second dataset.
    EvalEvoked(EvalEvokedArgs),
    /// Channel covariance.
    EvalCov(EvalCovArgs),
    /// Permutation feature importance of a decoder.
    Pfi(PfiArgs),
    /// Run an acceptance scenario and print PASS/FAIL per criterion.
    Repro(ReproArgs),
}

fn parse_window(s: &str) -> Result<Value, String> {
    if s == "full" {
        return Ok(Value::from("full"));
    }
    s.parse::<f64>().map(Value::from).map_err(|_| format!("expected milliseconds or `full`, got {s:?}"))
}

fn parse_strategy(s: &str) -> Result<Value, String> {
    let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
    match (kind, arg) {
        ("argmax" | "full", None) => Ok(serde_json::json!({ "kind": kind })),
        ("top-k", Some(a)) => a.parse::<usize>().map(|k| serde_json::json!({ "kind": "topk", "value": k })).map_err(|e| e.to_string()),
        ("top-p", Some(a)) => a.parse::<f64>().map(|p| serde_json::json!({ "kind": "topp", "value": p })).map_err(|e| e.to_string()),
        _ => Err(format!("expected argmax, full, top-k:<k> or top-p:<p>, got {s:?}")),
    }
}

fn parse_list(s: &str) -> Result<Value, String> {
    let v: Result<Vec<f64>, String> = s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect();
    Ok(Value::from(v?))
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Reference preset: sim4, sim8 or sim12 (ignored when the config holds a full spec).
    #[arg(long)]
    pub preset: Option<String>,
    /// Duration of a preset simulation in seconds.
    #[arg(long)]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantizeArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Series (NKT1, C x T).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of bins.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Clip in standard deviations before max-abs scaling.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Leading fraction of the series used to fit the normalisation.
    #[arg(long)]
    pub fit_fraction: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub order: Option<usize>,
    /// univariate or multivariate.
    #[arg(long)]
    pub mode: Option<String>,
    /// Z-score channels before fitting.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub standardize: Option<bool>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Trials (NKT1, N x C x T); the training set for `evaluate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labels CSV (trial, label).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Held-out trials for `evaluate`.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// lda-pca, lda-nn, nn or wavenet-cls.
    #[arg(long, value_parser = ["lda-pca", "lda-nn", "nn", "wavenet-cls"])]
    pub pipeline: Option<String>,
    /// Sliding window length in ms, or `full`.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<Value>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Principal components for lda-pca.
    #[arg(long)]
    pub components: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainForecasterArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// simple (continuous series) or quantized (token file).
    #[arg(long, value_parser = ["simple", "quantized"])]
    pub model: Option<String>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Condition timecourse CSV (sample_index, condition_index; -1 for none).
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    #[arg(long)]
    pub subject: Option<usize>,
    /// Overrides the schedule's epoch cap.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the hidden width.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Checkpoint directory written by train-forecaster.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Series (simple) or token file (quantized) whose tail primes the model.
    #[arg(long)]
    pub primer: Option<PathBuf>,
    /// argmax, full, top-k:<k> or top-p:<p>.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Value>,
    /// Innovation scale for SimpleWavenet generation.
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Condition of each generated step (CSV, sample_index, condition_index).
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    #[arg(long)]
    pub subject: Option<usize>,
    /// Output sampling rate when generating without a primer.
    #[arg(long)]
    pub fs: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct BayesDecodeArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Token file to decode.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Condition timecourse CSV; marks where a stimulus is present.
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    /// Trial table CSV (trial, start, end) in token columns.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// Comma-separated priors (default uniform).
    #[arg(long, value_parser = parse_list)]
    pub priors: Option<Value>,
    #[arg(long)]
    pub subject: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitHmmArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub states: Option<usize>,
    /// Time-delay embedding lags.
    #[arg(long)]
    pub tde: Option<usize>,
    /// PCA dimensionality after embedding.
    #[arg(long)]
    pub pca: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalPsdArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Welch segment length in samples (default: one second).
    #[arg(long)]
    pub seg_len: Option<usize>,
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Comma-separated Morlet frequencies in Hz; writes wavelet.nkt.
    #[arg(long, value_parser = parse_list)]
    pub morlet: Option<Value>,
    #[arg(long)]
    pub cycles: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalEvokedArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Trials (NKT1, N x C x T).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Labels CSV; evoked responses are then computed per condition.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Second trial set (e.g. generated) to correlate against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalCovArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PfiArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_parser = ["temporal", "spatial", "spatiotemporal", "spectral", "temporospectral", "spatiospectral"])]
    pub kind: Option<String>,
    /// Shuffle everything except the feature.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub inverse: Option<bool>,
    /// Time window (and stride) in ms.
    #[arg(long)]
    pub window_ms: Option<f64>,
    /// Channels per spatial group.
    #[arg(long)]
    pub window_sensors: Option<usize>,
    /// Band width in Hz.
    #[arg(long)]
    pub window_hz: Option<f64>,
    #[arg(long)]
    pub n_perm: Option<usize>,
    /// Sensor layout CSV (channel, x, y) for nearest-neighbour groups.
    #[arg(long)]
    pub coords: Option<PathBuf>,
    /// Decoder explained: lda-pca or nn.
    #[arg(long, value_parser = ["lda-pca", "nn"])]
    pub classifier: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReproArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// all, appendix-c, decoding, bayes, numerics, or c<N> for one criterion.
    pub suite: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let threads = match &cli.command {
        Command::Simulate(a) => a.common.threads,
        Command::Quantize(a) => a.common.threads,
        Command::FitAr(a) => a.common.threads,
        Command::TrainDecoder(a) | Command::Evaluate(a) => a.common.threads,
        Command::TrainForecaster(a) => a.common.threads,
        Command::Generate(a) => a.common.threads,
        Command::BayesDecode(a) => a.common.threads,
        Command::FitHmm(a) => a.common.threads,
        Command::EvalPsd(a) => a.common.threads,
        Command::EvalEvoked(a) => a.common.threads,
        Command::EvalCov(a) => a.common.threads,
        Command::Pfi(a) => a.common.threads,
        Command::Repro(a) => a.common.threads,
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::FAILURE;
    }
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::FitAr(a) => commands::fit_ar(a),
        Command::TrainDecoder(a) => models::train_decoder(a),
        Command::Evaluate(a) => models::evaluate(a),
        Command::TrainForecaster(a) => models::train_forecaster(a),
        Command::Generate(a) => models::generate(a),
        Command::BayesDecode(a) => models::bayes_decode(a),
        Command::FitHmm(a) => commands::fit_hmm(a),
        Command::EvalPsd(a) => commands::eval_psd(a),
        Command::EvalEvoked(a) => commands::eval_evoked(a),
        Command::EvalCov(a) => commands::eval_cov(a),
        Command::Pfi(a) => models::pfi(a),
        Command::Repro(a) => commands::repro(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
