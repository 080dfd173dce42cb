//! Model-side subcommands: decoding, forecasting, generation, Bayes
//! decoding and permutation feature importance.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ephys_core::data::{split_stratified, standardize, EpochedDataset, NormParams};
use ephys_core::decoders::{
    accuracy, complement, lda_nn_pipeline, lda_pca_pipeline, pca_projection, stratified_folds, train_linear_net,
    train_wavenet_classifier, Classifier, DecodeWindow, LinearNetConfig, ProjectedLda, Shrinkage, WavenetClassifierConfig,
    WindowScores,
};
use ephys_core::forecasters::{
    bayes_decode as bayes_posterior, entropy, generate_quantized, generate_simple, train_quantized_wavenet, train_simple_wavenet,
    GenerateOptions, QuantizedWavenetConfig, QuantizedWavenetModel, SamplingStrategy, SimpleWavenetConfig, SimpleWavenetModel,
};
use ephys_core::io::{fmt_f64, load_series, read_csv, read_index_column, save_series, write_csv};
use ephys_core::pfi::{knn_groups, run_pfi, FeatureWindow, PfiKind};
use ephys_core::quant::{dequantize, load_quantized, save_quantized, QuantizedSeries};
use ephys_core::rng::derive_seed;

use crate::commands::load_dataset;
use crate::config::{prepare_out, required, resolve};
use crate::{BayesDecodeArgs, DecodeArgs, GenerateArgs, PfiArgs, TrainForecasterArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    LdaPca,
    LdaNn,
    Nn,
    WavenetCls,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub pipeline: Pipeline,
    /// Sliding window in ms, or "full".
    pub window: Value,
    pub folds: usize,
    pub components: usize,
    pub shrinkage: Shrinkage,
    pub net: LinearNetConfig,
    pub wavenet: WavenetClassifierConfig,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            data: None,
            labels: None,
            test_data: None,
            test_labels: None,
            pipeline: Pipeline::LdaPca,
            window: Value::from("full"),
            folds: 5,
            components: 4,
            shrinkage: Shrinkage::Auto,
            net: LinearNetConfig::default(),
            wavenet: WavenetClassifierConfig::default(),
        }
    }
}

fn decode_window(v: &Value, fs: f64) -> Result<DecodeWindow> {
    match v {
        Value::String(s) if s == "full" => Ok(DecodeWindow::Full),
        Value::Number(n) => {
            let ms = n.as_f64().context("window must be a number of ms")?;
            if !(ms > 0.0) {
                bail!("window must be positive, got {ms} ms");
            }
            Ok(DecodeWindow::sliding_ms(ms, fs))
        }
        other => bail!("window must be a number of ms or \"full\", got {other}"),
    }
}

/// Trains the configured pipeline on `train` and scores `test`.
fn score_split(p: &DecodeParams, train: &EpochedDataset, test: &EpochedDataset, seed: u64) -> Result<WindowScores> {
    let window = decode_window(&p.window, train.fs())?;
    let full_only = |name: &str| -> Result<()> {
        if window != DecodeWindow::Full {
            bail!("the {name} pipeline decodes full epochs only; use --window full");
        }
        Ok(())
    };
    let t = train.timesteps();
    Ok(match p.pipeline {
        Pipeline::LdaPca => lda_pca_pipeline(train, test, p.components, window, p.shrinkage)?,
        Pipeline::LdaNn => {
            let net = train_linear_net(train, None, &LinearNetConfig { seed, ..p.net.clone() })?;
            lda_nn_pipeline(train, test, &net, window, p.shrinkage)?
        }
        Pipeline::Nn => {
            full_only("nn")?;
            let net = train_linear_net(train, None, &LinearNetConfig { seed, ..p.net.clone() })?;
            let acc = accuracy(&net.predict(test.trials().view())?, test.labels());
            WindowScores { starts: vec![0], len: t, accuracy: vec![acc] }
        }
        Pipeline::WavenetCls => {
            full_only("wavenet-cls")?;
            let model = train_wavenet_classifier(train, None, None, &WavenetClassifierConfig { seed, ..p.wavenet.clone() })?;
            let acc = model.accuracy_with(test.trials().view(), test.labels(), None)?;
            WindowScores { starts: vec![0], len: t, accuracy: vec![acc] }
        }
    })
}

fn metric_rows(fold: usize, scores: &WindowScores, fs: f64) -> Vec<[String; 3]> {
    scores
        .starts
        .iter()
        .zip(&scores.accuracy)
        .map(|(&st, &acc)| [fold.to_string(), fmt_f64(st as f64 * 1000.0 / fs), fmt_f64(acc)])
        .collect()
}

const METRIC_HEADER: [&str; 3] = ["fold", "window_start_ms", "accuracy"];

pub fn train_decoder(a: &DecodeArgs) -> Result<ExitCode> {
    let r = resolve::<_, DecodeParams>("train-decoder", &a.common, a, |m| m)?;
    let p = &r.params;
    let ds = load_dataset(required(&p.data, "data")?, Some(required(&p.labels, "labels")?))?;
    prepare_out(&a.common, &r)?;
    let folds = stratified_folds(ds.labels(), p.folds, r.seed)?;
    let mut rows = Vec::new();
    for (k, test_idx) in folds.iter().enumerate() {
        let train = ds.subset(&complement(test_idx, ds.n_trials()));
        let test = ds.subset(test_idx);
        let scores = score_split(p, &train, &test, derive_seed(r.seed, 1 + k as u64))?;
        rows.extend(metric_rows(k, &scores, ds.fs()));
    }
    write_csv(a.common.out.join("metrics.csv"), &METRIC_HEADER, rows)?;
    Ok(ExitCode::SUCCESS)
}

pub fn evaluate(a: &DecodeArgs) -> Result<ExitCode> {
    let r = resolve::<_, DecodeParams>("evaluate", &a.common, a, |m| m)?;
    let p = &r.params;
    let train = load_dataset(required(&p.data, "data")?, Some(required(&p.labels, "labels")?))?;
    let test = load_dataset(required(&p.test_data, "test_data")?, Some(required(&p.test_labels, "test_labels")?))?;
    prepare_out(&a.common, &r)?;
    let scores = score_split(p, &train, &test, derive_seed(r.seed, 1))?;
    write_csv(a.common.out.join("metrics.csv"), &METRIC_HEADER, metric_rows(0, &scores, train.fs()))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecasterKind {
    Simple,
    Quantized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainForecasterParams {
    pub model: ForecasterKind,
    pub input: Option<PathBuf>,
    pub conditions: Option<PathBuf>,
    pub subject: Option<usize>,
    pub epochs: Option<usize>,
    pub hidden: Option<usize>,
    /// Z-score the series before training a SimpleWavenet.
    pub standardize: bool,
    pub simple: SimpleWavenetConfig,
    pub quantized: QuantizedWavenetConfig,
}

impl Default for TrainForecasterParams {
    fn default() -> Self {
        Self {
            model: ForecasterKind::Simple,
            input: None,
            conditions: None,
            subject: None,
            epochs: None,
            hidden: None,
            standardize: true,
            simple: SimpleWavenetConfig::default(),
            quantized: QuantizedWavenetConfig::default(),
        }
    }
}

/// Condition timecourse CSV with `-1` for "no condition".
fn load_conditions(path: &Path) -> Result<Vec<Option<usize>>> {
    let v = read_index_column(path).with_context(|| format!("reading {}", path.display()))?;
    v.into_iter()
        .map(|c| match c {
            -1 => Ok(None),
            c if c >= 0 => Ok(Some(c as usize)),
            c => bail!("condition index {c} in {}; use -1 for none", path.display()),
        })
        .collect()
}

pub fn train_forecaster(a: &TrainForecasterArgs) -> Result<ExitCode> {
    let mut r = resolve::<_, TrainForecasterParams>("train-forecaster", &a.common, a, |m| m)?;
    // The global seed drives training; the resolved snapshot shows it.
    r.params.simple.schedule.seed = r.seed;
    r.params.quantized.schedule.seed = r.seed;
    if let Some(e) = r.params.epochs {
        r.params.simple.schedule.max_epochs = e;
        r.params.quantized.schedule.max_epochs = e;
    }
    if let Some(h) = r.params.hidden {
        r.params.simple.hidden = Some(h);
        r.params.quantized.hidden = h;
    }
    let input = required(&r.params.input, "input")?.to_path_buf();
    let dir = a.common.out.join("model");
    match r.params.model {
        ForecasterKind::Simple => {
            if r.params.conditions.is_some() {
                bail!("conditions need the quantized forecaster");
            }
            let series = load_series(&input)?;
            let (z, norm) = if r.params.standardize {
                let (z, n) = standardize(&series)?;
                (z, Some(n))
            } else {
                (series, None)
            };
            prepare_out(&a.common, &r)?;
            let (model, report) = train_simple_wavenet(&z, &r.params.simple)?;
            model.save(&dir)?;
            if let Some(n) = norm {
                std::fs::write(dir.join("norm.json"), serde_json::to_string_pretty(&n)?)?;
            }
            std::fs::write(a.common.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        }
        ForecasterKind::Quantized => {
            let q = load_quantized(&input)?;
            let conditions = r.params.conditions.as_deref().map(load_conditions).transpose()?;
            if let Some(cs) = &conditions {
                if r.params.quantized.conditions == 0 {
                    r.params.quantized.conditions = cs.iter().flatten().max().map_or(0, |m| m + 1);
                }
            }
            if let Some(s) = r.params.subject {
                r.params.quantized.subjects = r.params.quantized.subjects.max(s + 1);
            }
            prepare_out(&a.common, &r)?;
            let (model, report) = train_quantized_wavenet(&q, &r.params.quantized, conditions.as_deref(), r.params.subject)?;
            model.save(&dir)?;
            std::fs::write(a.common.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn checkpoint_kind(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.json");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
    v["model"]["kind"].as_str().map(str::to_owned).with_context(|| format!("{} names no model kind", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateParams {
    pub model: Option<PathBuf>,
    pub steps: usize,
    pub primer: Option<PathBuf>,
    pub strategy: SamplingStrategy,
    pub noise_scale: f64,
    pub conditions: Option<PathBuf>,
    pub subject: Option<usize>,
    /// Sampling rate of the output when there is no primer.
    pub fs: Option<f64>,
}

impl Default for GenerateParams {
    fn default() -> Self {
        Self { model: None, steps: 1000, primer: None, strategy: SamplingStrategy::Full, noise_scale: 1.0, conditions: None, subject: None, fs: None }
    }
}

pub fn generate(a: &GenerateArgs) -> Result<ExitCode> {
    let r = resolve::<_, GenerateParams>("generate", &a.common, a, |m| m)?;
    let p = &r.params;
    let dir = required(&p.model, "model")?;
    match checkpoint_kind(dir)?.as_str() {
        "simple_wavenet" => {
            let model = SimpleWavenetModel::load(dir)?;
            let norm_path = dir.join("norm.json");
            let norm: Option<NormParams> =
                if norm_path.exists() { Some(serde_json::from_str(&std::fs::read_to_string(norm_path)?)?) } else { None };
            let primer = match &p.primer {
                Some(path) => {
                    let s = load_series(path)?;
                    match &norm {
                        Some(n) => n.apply(&s)?.into_data(),
                        None => s.into_data(),
                    }
                }
                None => Array2::zeros((model.channels, model.receptive_field())),
            };
            prepare_out(&a.common, &r)?;
            let g = generate_simple(&model, primer.view(), p.steps, p.noise_scale, r.seed)?;
            let g = match &norm {
                Some(n) => n.invert(&g)?,
                None => g,
            };
            save_series(a.common.out.join("generated.nkt"), &g)?;
        }
        "quantized_wavenet" => {
            let model = QuantizedWavenetModel::load(dir)?;
            let (primer, fs, zero_history) = match &p.primer {
                Some(path) => {
                    let q = load_quantized(path)?;
                    (q.tokens, q.fs, false)
                }
                None => (Array2::zeros((model.channels, 0)), p.fs.context("generation without a primer needs `fs`")?, true),
            };
            let conditions = p.conditions.as_deref().map(load_conditions).transpose()?;
            prepare_out(&a.common, &r)?;
            let opts = GenerateOptions {
                steps: p.steps,
                strategy: p.strategy,
                conditions,
                primer_conditions: None,
                subject: p.subject,
                seed: r.seed,
            };
            let tokens = generate_quantized(&model, &primer, &opts, zero_history)?;
            let q = QuantizedSeries { tokens, quantizer: model.quantizer.clone(), fs };
            save_quantized(a.common.out.join("generated_tokens.nkt"), &q)?;
            save_series(a.common.out.join("generated.nkt"), &dequantize(&q)?)?;
        }
        k => bail!("cannot generate from a {k} checkpoint"),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesDecodeParams {
    pub model: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
    pub conditions: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub priors: Option<Vec<f64>>,
    pub subject: Option<usize>,
}

/// `(start, end)` token columns of each trial.
fn load_trial_table(path: &Path) -> Result<Vec<(usize, usize)>> {
    let (header, rows) = read_csv(path).with_context(|| format!("reading {}", path.display()))?;
    let col = |name: &str| header.iter().position(|h| h == name).with_context(|| format!("{} has no {name:?} column", path.display()));
    let (cs, ce) = (col("start")?, col("end")?);
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let get = |c: usize| -> Result<usize> {
                row.get(c).and_then(|v| v.trim().parse().ok()).with_context(|| format!("{} row {i}: bad start/end", path.display()))
            };
            let (a, b) = (get(cs)?, get(ce)?);
            if b <= a {
                bail!("{} row {i}: empty trial [{a}, {b})", path.display());
            }
            Ok((a, b))
        })
        .collect()
}

pub fn bayes_decode(a: &BayesDecodeArgs) -> Result<ExitCode> {
    let r = resolve::<_, BayesDecodeParams>("bayes-decode", &a.common, a, |m| m)?;
    let p = &r.params;
    let model = QuantizedWavenetModel::load(required(&p.model, "model")?)?;
    let q = load_quantized(required(&p.tokens, "tokens")?)?;
    let conditions = load_conditions(required(&p.conditions, "conditions")?)?;
    if conditions.len() != q.timesteps() {
        bail!("{} condition samples for {} token columns", conditions.len(), q.timesteps());
    }
    let trials = load_trial_table(required(&p.trials, "trials")?)?;
    let n = model.config.conditions;
    let priors = p.priors.clone().unwrap_or_else(|| vec![1.0 / n.max(1) as f64; n]);
    prepare_out(&a.common, &r)?;
    let mut header = vec!["trial".to_string(), "true_condition".into(), "predicted".into()];
    header.extend((0..n).map(|i| format!("posterior_{i}")));
    header.push("floored".into());
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (k, &(start, end)) in trials.iter().enumerate() {
        if end > q.timesteps() {
            bail!("trial {k} ends at {end}, past the {} token columns", q.timesteps());
        }
        let tokens = q.tokens.slice(s![.., start..end]).to_owned();
        let active: Vec<bool> = conditions[start..end].iter().map(Option::is_some).collect();
        let truth = conditions[start..end].iter().flatten().next().map_or(-1, |&c| c as i64);
        let post = bayes_posterior(&model, &tokens, &active, &priors, p.subject)?;
        let pred = (0..n).fold(0, |b, i| if post.posterior[i] > post.posterior[b] { i } else { b });
        let mut row = vec![k.to_string(), truth.to_string(), pred.to_string()];
        row.extend(post.posterior.iter().map(|v| fmt_f64(*v)));
        row.push(post.floored.to_string());
        rows.push(row);
        for (j, pr) in post.running.iter().enumerate() {
            curves.push([k.to_string(), j.to_string(), fmt_f64(entropy(pr))]);
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(a.common.out.join("posteriors.csv"), &header_refs, rows)?;
    write_csv(a.common.out.join("entropy.csv"), &["trial", "step", "entropy"], curves)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PfiClassifier {
    LdaPca,
    Nn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfiParams {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub kind: PfiKind,
    pub inverse: bool,
    pub window_ms: f64,
    pub window_sensors: usize,
    pub window_hz: f64,
    pub n_perm: usize,
    pub coords: Option<PathBuf>,
    pub classifier: PfiClassifier,
    pub components: usize,
    pub shrinkage: Shrinkage,
    /// Train:test ratio of the stratified split; PFI runs on the test part.
    pub split: (u32, u32),
    pub net: LinearNetConfig,
}

impl Default for PfiParams {
    fn default() -> Self {
        Self {
            data: None,
            labels: None,
            kind: PfiKind::Temporal,
            inverse: false,
            window_ms: 100.0,
            window_sensors: 1,
            window_hz: 4.0,
            n_perm: 20,
            coords: None,
            classifier: PfiClassifier::LdaPca,
            components: 4,
            shrinkage: Shrinkage::Auto,
            split: (1, 1),
            net: LinearNetConfig::default(),
        }
    }
}

fn load_coords(path: &Path) -> Result<Vec<(f64, f64)>> {
    let (_, rows) = read_csv(path).with_context(|| format!("reading {}", path.display()))?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let get = |c: usize| row.get(c).and_then(|v| v.trim().parse::<f64>().ok());
            match (get(1), get(2)) {
                (Some(x), Some(y)) => Ok((x, y)),
                _ => bail!("{} row {i}: expected channel, x, y", path.display()),
            }
        })
        .collect()
}

pub fn pfi(a: &PfiArgs) -> Result<ExitCode> {
    let r = resolve::<_, PfiParams>("pfi", &a.common, a, |m| m)?;
    let p = &r.params;
    let ds = load_dataset(required(&p.data, "data")?, Some(required(&p.labels, "labels")?))?;
    let c = ds.channels();
    let fs = ds.fs();
    let groups = match &p.coords {
        Some(path) => {
            let coords = load_coords(path)?;
            if coords.len() != c {
                bail!("{} sensor positions for {c} channels", coords.len());
            }
            knn_groups(&coords, p.window_sensors)
        }
        None if p.window_sensors <= 1 => Vec::new(),
        None => (0..c).step_by(p.window_sensors).map(|s| (s..(s + p.window_sensors).min(c)).collect()).collect(),
    };
    let time = ((p.window_ms * fs / 1000.0).round() as usize).max(1);
    let window = FeatureWindow {
        time_len: time,
        time_stride: time,
        groups,
        band_hz: p.window_hz,
        inverse: p.inverse,
        ..FeatureWindow::new(p.kind)
    };
    let (train, test) = split_stratified(&ds, p.split, derive_seed(r.seed, 1))?;
    prepare_out(&a.common, &r)?;
    let model: Box<dyn Classifier> = match p.classifier {
        PfiClassifier::LdaPca => {
            let (proj, mean) = pca_projection(&train, p.components)?;
            Box::new(ProjectedLda::fit(&train, proj, Some(mean), p.shrinkage)?)
        }
        PfiClassifier::Nn => Box::new(train_linear_net(&train, None, &LinearNetConfig { seed: derive_seed(r.seed, 2), ..p.net.clone() })?),
    };
    let res = run_pfi(model.as_ref(), test.trials().view(), test.labels(), fs, &window, p.n_perm, derive_seed(r.seed, 3))?;
    let w = res.axis2.len().max(1);
    let axis2 = |j: usize| res.axis2.get(j % w).map_or(String::new(), |v| fmt_f64(*v));
    write_csv(
        a.common.out.join("pfi_raw.csv"),
        &["feature", "axis1", "axis2", "permutation", "delta"],
        res.raw.iter().enumerate().flat_map(|(j, raw)| {
            let (a1, a2) = (fmt_f64(res.axis1[j / w]), axis2(j));
            raw.iter().enumerate().map(move |(k, v)| [j.to_string(), a1.clone(), a2.clone(), k.to_string(), fmt_f64(*v)])
        }),
    )?;
    write_csv(
        a.common.out.join("pfi.csv"),
        &["feature", "axis1", "axis2", "delta", "ci95_width"],
        (0..res.delta.len()).map(|j| [j.to_string(), fmt_f64(res.axis1[j / w]), axis2(j), fmt_f64(res.delta[j]), fmt_f64(res.ci_width(j))]),
    )?;
    std::fs::write(
        a.common.out.join("pfi_summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "baseline_accuracy": res.baseline, "argmax_feature": res.argmax(), "n_perm": res.n_perm }))?,
    )?;
    Ok(ExitCode::SUCCESS)
}
