//! Data-side subcommands: simulation, quantization, AR and HMM fits,
//! spectral/evoked/covariance evaluation, and the acceptance runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ndarray::{Array3, Ix3};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use ephys_core::data::{standardize, EpochedDataset};
use ephys_core::hmm::{fit_hmm as fit_hmm_model, state_statistics, HmmConfig};
use ephys_core::io::{fmt_f64, load_array, load_series, read_index_column, save_array, save_series, write_csv, write_index_column};
use ephys_core::linmodels::{fit_ar as fit_ar_model, ArMode};
use ephys_core::quant::{save_quantized, Quantizer};
use ephys_core::repro::{metrics_csv, run_criterion, suite};
use ephys_core::rng::derive_seed;
use ephys_core::sim::{simulate as run_sim, SimSpec, FREQS_12, FREQS_4, FREQS_8};
use ephys_core::spectral::{covariance, evoked_average, evoked_correlation, morlet_transform, welch_psd, Window};

use crate::config::{prepare_out, required, resolve};
use crate::{EvalCovArgs, EvalEvokedArgs, EvalPsdArgs, FitArArgs, FitHmmArgs, QuantizeArgs, ReproArgs, SimulateArgs};

pub fn load_trials(path: &Path) -> Result<(Array3<f64>, f64)> {
    let (t, fs) = load_array(path).with_context(|| format!("reading {}", path.display()))?;
    let r = t.ndim();
    let t = t.into_dimensionality::<Ix3>().map_err(|_| anyhow::anyhow!("{} has rank {r}, expected N x C x T trials", path.display()))?;
    Ok((t, fs))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let v = read_index_column(path).with_context(|| format!("reading {}", path.display()))?;
    v.into_iter()
        .map(|l| usize::try_from(l).map_err(|_| anyhow::anyhow!("negative label {l} in {}", path.display())))
        .collect()
}

/// Trials plus labels (all zero when no label file is given).
pub fn load_dataset(data: &Path, labels: Option<&Path>) -> Result<EpochedDataset> {
    let (trials, fs) = load_trials(data)?;
    let labels = match labels {
        Some(p) => load_labels(p)?,
        None => vec![0; trials.dim().0],
    };
    Ok(EpochedDataset::from_labels(trials, labels, fs)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateParams {
    pub preset: String,
    pub duration_s: f64,
    /// Full specification; overrides the preset.
    pub spec: Option<SimSpec>,
}

impl Default for SimulateParams {
    fn default() -> Self {
        Self { preset: "sim8".into(), duration_s: 60.0, spec: None }
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<ExitCode> {
    // A config file that is itself a SimSpec is taken as the spec.
    let r = resolve::<_, SimulateParams>("simulate", &a.common, a, |m| {
        if m.contains_key("transition") {
            let mut w = Map::new();
            w.insert("spec".into(), Value::Object(m));
            w
        } else {
            m
        }
    })?;
    let spec = match &r.params.spec {
        Some(s) => s.clone(),
        None => {
            let freqs: &[f64] = match r.params.preset.as_str() {
                "sim4" => &FREQS_4,
                "sim8" => &FREQS_8,
                "sim12" => &FREQS_12,
                p => bail!("unknown preset {p:?} (sim4, sim8, sim12)"),
            };
            SimSpec::reference(freqs, r.params.duration_s, derive_seed(r.seed, 1))
        }
    };
    let mut r = r;
    r.params.spec = Some(spec.clone());
    prepare_out(&a.common, &r)?;
    let (series, tc) = run_sim(&spec, r.seed)?;
    save_series(a.common.out.join("series.nkt"), &series)?;
    let states: Vec<i64> = tc.states.iter().map(|&s| s as i64).collect();
    write_index_column(a.common.out.join("states.csv"), "state", &states)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeParams {
    pub input: Option<PathBuf>,
    pub q: usize,
    pub mu: f64,
    pub clip: f64,
    pub fit_fraction: f64,
}

impl Default for QuantizeParams {
    fn default() -> Self {
        Self { input: None, q: 256, mu: 255.0, clip: 4.0, fit_fraction: 1.0 }
    }
}

pub fn quantize(a: &QuantizeArgs) -> Result<ExitCode> {
    let r = resolve::<_, QuantizeParams>("quantize", &a.common, a, |m| m)?;
    let p = &r.params;
    let series = load_series(required(&p.input, "input")?)?;
    if !(p.fit_fraction > 0.0 && p.fit_fraction <= 1.0) {
        bail!("fit_fraction must be in (0, 1]");
    }
    let fit_len = ((series.timesteps() as f64 * p.fit_fraction).round() as usize).max(2);
    prepare_out(&a.common, &r)?;
    let quant = Quantizer::fit(&series.slice_time(0, fit_len)?, p.q, p.mu, p.clip)?;
    save_quantized(a.common.out.join("tokens.nkt"), &quant.encode(&series)?)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitArParams {
    pub input: Option<PathBuf>,
    pub order: usize,
    pub mode: ArMode,
    pub standardize: bool,
}

impl Default for FitArParams {
    fn default() -> Self {
        Self { input: None, order: 10, mode: ArMode::Univariate, standardize: false }
    }
}

pub fn fit_ar(a: &FitArArgs) -> Result<ExitCode> {
    let r = resolve::<_, FitArParams>("fit-ar", &a.common, a, |m| m)?;
    let p = &r.params;
    let mut series = load_series(required(&p.input, "input")?)?;
    if p.standardize {
        series = standardize(&series)?.0;
    }
    prepare_out(&a.common, &r)?;
    let model = fit_ar_model(&series, p.order, p.mode)?;
    std::fs::write(a.common.out.join("ar.json"), serde_json::to_string_pretty(&model)?)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitHmmParams {
    pub input: Option<PathBuf>,
    pub states: usize,
    pub tde: usize,
    pub pca: Option<usize>,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub standardize: bool,
}

impl Default for FitHmmParams {
    fn default() -> Self {
        let d = HmmConfig::default();
        Self { input: None, states: d.states, tde: d.lags, pca: d.pca, restarts: d.restarts, max_iters: d.max_iters, tol: d.tol, standardize: true }
    }
}

pub fn fit_hmm(a: &FitHmmArgs) -> Result<ExitCode> {
    let r = resolve::<_, FitHmmParams>("fit-hmm", &a.common, a, |m| m)?;
    let p = &r.params;
    let mut series = load_series(required(&p.input, "input")?)?;
    if p.standardize {
        series = standardize(&series)?.0;
    }
    prepare_out(&a.common, &r)?;
    let cfg = HmmConfig {
        states: p.states,
        max_iters: p.max_iters,
        tol: p.tol,
        restarts: p.restarts,
        seed: r.seed,
        lags: p.tde,
        pca: p.pca,
    };
    let model = fit_hmm_model(series.view(), &cfg)?;
    let path = model.viterbi(series.view())?;
    let offset = model.preprocess.offset();
    std::fs::write(a.common.out.join("hmm.json"), serde_json::to_string_pretty(&model)?)?;
    write_csv(
        a.common.out.join("states.csv"),
        &["sample_index", "state"],
        path.iter().enumerate().map(|(i, s)| [(i + offset).to_string(), s.to_string()]),
    )?;
    let st = state_statistics(&path, p.states, series.fs())?;
    write_csv(
        a.common.out.join("stats.csv"),
        &["state", "fo", "lifetime_s", "interval_s", "switch_hz"],
        (0..p.states).map(|k| {
            [
                k.to_string(),
                fmt_f64(st.fractional_occupancy[k]),
                fmt_f64(st.mean_lifetime[k]),
                fmt_f64(st.mean_interval[k]),
                fmt_f64(st.switching_rate[k]),
            ]
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPsdParams {
    pub input: Option<PathBuf>,
    pub seg_len: Option<usize>,
    pub overlap: f64,
    pub window: Window,
    pub morlet: Option<Vec<f64>>,
    pub cycles: f64,
}

impl Default for EvalPsdParams {
    fn default() -> Self {
        Self { input: None, seg_len: None, overlap: 0.5, window: Window::Hann, morlet: None, cycles: 7.0 }
    }
}

pub fn eval_psd(a: &EvalPsdArgs) -> Result<ExitCode> {
    let r = resolve::<_, EvalPsdParams>("eval-psd", &a.common, a, |m| m)?;
    let p = &r.params;
    let series = load_series(required(&p.input, "input")?)?;
    prepare_out(&a.common, &r)?;
    let seg = p.seg_len.unwrap_or((series.fs().round() as usize).min(series.timesteps()));
    let psd = welch_psd(&series, seg, p.overlap, p.window)?;
    let mut rows = Vec::new();
    for (c, row) in psd.power.iter().enumerate() {
        for (f, v) in psd.freqs.iter().zip(row) {
            rows.push([c.to_string(), fmt_f64(*f), fmt_f64(*v)]);
        }
    }
    write_csv(a.common.out.join("psd.csv"), &["channel", "freq_hz", "power"], rows)?;
    if let Some(freqs) = &p.morlet {
        let w = morlet_transform(&series, freqs, p.cycles)?;
        save_array(a.common.out.join("wavelet.nkt"), &w.power.into_dyn(), series.fs())?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalEvokedParams {
    pub input: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub compare: Option<PathBuf>,
}

pub fn eval_evoked(a: &EvalEvokedArgs) -> Result<ExitCode> {
    let r = resolve::<_, EvalEvokedParams>("eval-evoked", &a.common, a, |m| m)?;
    let p = &r.params;
    let real = load_dataset(required(&p.input, "input")?, p.labels.as_deref())?;
    prepare_out(&a.common, &r)?;
    let per_condition = p.labels.is_some();
    let mut rows = Vec::new();
    for (k, ev) in evoked_average(&real, per_condition)?.into_iter().enumerate() {
        let Some(ev) = ev else { continue };
        for ((c, t), m) in ev.mean.indexed_iter() {
            rows.push([k.to_string(), c.to_string(), t.to_string(), fmt_f64(*m), fmt_f64(ev.var[[c, t]])]);
        }
    }
    write_csv(a.common.out.join("evoked.csv"), &["condition", "channel", "sample", "mean", "var"], rows)?;
    if let Some(other) = &p.compare {
        let generated = load_dataset(other, None)?;
        let real_all = EpochedDataset::from_labels(real.trials().clone(), vec![0; real.n_trials()], real.fs())?;
        let corr = evoked_correlation(&real_all, &generated)?;
        write_csv(
            a.common.out.join("evoked_corr.csv"),
            &["channel", "mean_corr", "var_corr"],
            corr.mean_corr.iter().zip(&corr.var_corr).enumerate().map(|(c, (m, v))| [c.to_string(), fmt_f64(*m), fmt_f64(*v)]),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCovParams {
    pub input: Option<PathBuf>,
}

pub fn eval_cov(a: &EvalCovArgs) -> Result<ExitCode> {
    let r = resolve::<_, EvalCovParams>("eval-cov", &a.common, a, |m| m)?;
    let series = load_series(required(&r.params.input, "input")?)?;
    prepare_out(&a.common, &r)?;
    let cov = covariance(&series)?;
    write_csv(
        a.common.out.join("cov.csv"),
        &["row", "col", "value"],
        cov.indexed_iter().map(|((i, j), v)| [i.to_string(), j.to_string(), fmt_f64(*v)]),
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproParams {
    pub suite: String,
    pub criteria: Vec<usize>,
}

pub fn repro(a: &ReproArgs) -> Result<ExitCode> {
    let ids = suite(&a.suite)?;
    let mut r = resolve::<_, ReproParams>("repro", &a.common, &serde_json::json!({ "suite": a.suite, "criteria": ids }), |m| m)?;
    r.params.criteria = ids.clone();
    prepare_out(&a.common, &r)?;
    let mut outcomes = Vec::new();
    for id in ids {
        let o = run_criterion(id, r.seed)?;
        println!("{}", o.line());
        outcomes.push(o);
    }
    std::fs::write(a.common.out.join("metrics.csv"), metrics_csv(&outcomes))?;
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    Ok(if passed == outcomes.len() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
