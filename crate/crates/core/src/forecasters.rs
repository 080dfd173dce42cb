//! Dilated-convolution forecasters: the continuous SimpleWavenet, the
//! quantized gated Wavenet with per-channel token embeddings and optional
//! condition / subject conditioning, sampling strategies, recursive
//! generation and Bayes-rule decoding of conditions.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::MultichannelSeries;
use crate::error::{Error, Result};
use crate::linmodels::{ArModel, DIVERGENCE_GUARD};
use crate::nnet::{log_softmax, save_checkpoint, load_checkpoint, Activation, Graph, OptimState, ParamStore, Tensor, Var};
use crate::quant::{QuantizedSeries, Quantizer};
use crate::rng::{derive_seed, permutation, rng_from, Rng};

/// Anything that can continue a multichannel series recursively without
/// added noise.
pub trait Forecaster {
    /// Samples of history needed before the first forecast step.
    fn history(&self) -> usize;

    /// Forecasts `horizon` steps after `x[.., start - 1]` using
    /// `x[.., start - history .. start]` as context.
    fn forecast(&self, x: ArrayView2<'_, f64>, start: usize, horizon: usize) -> Array2<f64>;
}

impl Forecaster for ArModel {
    fn history(&self) -> usize {
        self.order
    }

    fn forecast(&self, x: ArrayView2<'_, f64>, start: usize, horizon: usize) -> Array2<f64> {
        ArModel::forecast(self, x, start, horizon)
    }
}

/// Per-horizon error and prediction variance of recursive forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// MSE at horizons `1..=H`, averaged over channels and start points.
    pub mse: Vec<f64>,
    /// Variance of the predictions at each horizon across start points,
    /// averaged over channels.
    pub pred_var: Vec<f64>,
    /// Variance of the targets, averaged over channels.
    pub target_var: f64,
    pub starts: usize,
}

/// Runs `model` from every `stride`-th admissible start of `x` for `horizon`
/// steps and compares the recursion to the data.
pub fn horizon_metrics(model: &dyn Forecaster, x: ArrayView2<'_, f64>, horizon: usize, stride: usize) -> Result<HorizonMetrics> {
    let (c, t) = x.dim();
    let r = model.history();
    if t < r + horizon || stride == 0 || horizon == 0 {
        return Err(Error::shape(format!("{t} samples cannot host history {r} plus horizon {horizon}")));
    }
    let starts: Vec<usize> = (r..=t - horizon).step_by(stride).collect();
    let n = starts.len() as f64;
    let mut se = vec![0.0; horizon];
    let mut sum = vec![vec![0.0; c]; horizon];
    let mut sq = vec![vec![0.0; c]; horizon];
    for &s in &starts {
        let f = model.forecast(x, s, horizon);
        for h in 0..horizon {
            for ch in 0..c {
                let p = f[[ch, h]];
                let d = p - x[[ch, s + h]];
                se[h] += d * d;
                sum[h][ch] += p;
                sq[h][ch] += p * p;
            }
        }
    }
    let mse = se.iter().map(|v| v / (n * c as f64)).collect();
    let pred_var = (0..horizon)
        .map(|h| (0..c).map(|ch| sq[h][ch] / n - (sum[h][ch] / n).powi(2)).sum::<f64>() / c as f64 * n / (n - 1.0).max(1.0))
        .collect();
    let (_, stds) = crate::data::channel_stats(x.slice(ndarray::s![.., r..]));
    let target_var = stds.iter().map(|s| s * s).sum::<f64>() / c as f64;
    Ok(HorizonMetrics { mse, pred_var, target_var, starts: starts.len() })
}

/// Training schedule shared by the Wavenet forecasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Training segments per optimiser step.
    pub batch: usize,
    /// Predicted samples per segment (the segment input is
    /// `receptive_field - 1 + segment` long).
    pub segment: usize,
    /// Cap on optimiser steps per epoch; `None` sweeps the training data.
    pub steps_per_epoch: Option<usize>,
    /// Fraction of the series held out (from the end) for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 50,
            patience: Some(5),
            batch: 4,
            segment: 512,
            steps_per_epoch: None,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Loss curve of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    /// Records an epoch; returns whether it improved the best validation loss.
    fn record(&mut self, train: f64, val: f64) -> bool {
        self.train_loss.push(train);
        self.val_loss.push(val);
        let improved = self.val_loss.len() == 1 || val < self.best_val_loss;
        if improved {
            self.best_val_loss = val;
            self.best_epoch = self.val_loss.len() - 1;
        }
        improved
    }

    fn since_best(&self) -> usize {
        self.val_loss.len() - 1 - self.best_epoch
    }
}

/// Splits `t` samples into contiguous train / validation ranges.
fn split_point(t: usize, val_fraction: f64, min_len: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let split = t - (t as f64 * val_fraction).round() as usize;
    if split < min_len || (val_fraction > 0.0 && t - split < min_len) {
        return Err(Error::shape(format!("{t} samples are too few for segments of {min_len}")));
    }
    Ok(split)
}

/// Segment starts for one epoch: a shuffled tiling of `0..span` with a
/// random phase.
fn epoch_starts(span: usize, step: usize, rng: &mut Rng) -> Vec<usize> {
    let phase = rng.random_range(0..step.max(1));
    let n = if span > phase { (span - phase) / step } else { 0 };
    let mut starts: Vec<usize> = (0..n.max(1)).map(|k| (phase + k * step).min(span.saturating_sub(1))).collect();
    let order = permutation(starts.len(), rng);
    starts = order.into_iter().map(|i| starts[i]).collect();
    starts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimpleWavenetConfig {
    /// Dilated layers; the receptive field is `2^layers`.
    pub layers: usize,
    /// Hidden width; defaults to `2 C`.
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub schedule: TrainSchedule,
}

impl Default for SimpleWavenetConfig {
    fn default() -> Self {
        Self { layers: 9, hidden: None, activation: Activation::Asinh, schedule: TrainSchedule::default() }
    }
}

/// `1x1` projection `C -> H`, `L` kernel-2 dilated layers with doubling
/// dilation and a pointwise activation, `1x1` projection `H -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleWavenetModel {
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub activation: Activation,
    pub params: ParamStore,
    /// Per-channel one-step residual variance on the training data; scales
    /// the innovations of stochastic generation.
    pub residual_var: Vec<f64>,
    pub fs: f64,
}

#[derive(Serialize, Deserialize)]
struct SimpleWavenetMeta {
    kind: String,
    channels: usize,
    hidden: usize,
    layers: usize,
    activation: Activation,
    residual_var: Vec<f64>,
    fs: f64,
}

impl SimpleWavenetModel {
    pub fn new(channels: usize, hidden: usize, layers: usize, activation: Activation, fs: f64, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut p = ParamStore::new();
        p.add_xavier("in.w", &[hidden, channels, 1], channels, hidden, &mut rng);
        p.add_zeros("in.b", &[hidden]);
        for l in 0..layers {
            p.add_xavier(&format!("l{l}.w"), &[hidden, hidden, 2], 2 * hidden, 2 * hidden, &mut rng);
            p.add_zeros(&format!("l{l}.b"), &[hidden]);
        }
        p.add_xavier("out.w", &[channels, hidden, 1], hidden, channels, &mut rng);
        p.add_zeros("out.b", &[channels]);
        Self { channels, hidden, layers, activation, params: p, residual_var: vec![1.0; channels], fs }
    }

    pub fn receptive_field(&self) -> usize {
        1 << self.layers
    }

    /// Records the network on `x: [B, C, T]`; the output `[B, C, T - R + 1]`
    /// at position `j` predicts the sample after `x[.., j + R - 1]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.p("in.w")?, g.p("in.b")?);
        let mut h = g.conv1d(x, w, Some(b), 1)?;
        for l in 0..self.layers {
            let (w, b) = (g.p(&format!("l{l}.w"))?, g.p(&format!("l{l}.b"))?);
            h = g.conv1d(h, w, Some(b), 1 << l)?;
            h = g.act(h, self.activation);
        }
        let (w, b) = (g.p("out.w")?, g.p("out.b")?);
        g.conv1d(h, w, Some(b), 1)
    }

    /// One-step predictions for every column of `x` from `R` on,
    /// `C x (T - R + 1)`; the last column forecasts past the end.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (c, t) = x.dim();
        let r = self.receptive_field();
        if c != self.channels || t < r {
            return Err(Error::shape(format!("expected {} channels and >= {r} samples, got {c} x {t}", self.channels)));
        }
        let n_out = t - r + 1;
        let mut out = Array2::zeros((c, n_out));
        let chunk = 8192;
        let mut o = 0;
        while o < n_out {
            let len = chunk.min(n_out - o);
            let data: Vec<f64> = (0..c).flat_map(|ch| (o..o + len + r - 1).map(move |i| (ch, i))).map(|(ch, i)| x[[ch, i]]).collect();
            let mut g = Graph::new(&self.params);
            let xv = g.input(Tensor::from_vec(&[1, c, len + r - 1], data)?);
            let y = self.forward(&mut g, xv)?;
            let yv = &g.value(y).data;
            for ch in 0..c {
                for j in 0..len {
                    out[[ch, o + j]] = yv[ch * len + j];
                }
            }
            o += len;
        }
        Ok(out)
    }

    /// Mean one-step MSE over `x`.
    pub fn one_step_mse(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        let r = self.receptive_field();
        let pred = self.predict(x)?;
        let t = x.ncols();
        let n = t - r;
        let mut s = 0.0;
        for ch in 0..self.channels {
            for j in 0..n {
                s += (pred[[ch, j]] - x[[ch, j + r]]).powi(2);
            }
        }
        Ok(s / (n * self.channels).max(1) as f64)
    }

    pub fn stepper(&self) -> WavenetStepper<'_> {
        WavenetStepper::new(self)
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = SimpleWavenetMeta {
            kind: "simple_wavenet".into(),
            channels: self.channels,
            hidden: self.hidden,
            layers: self.layers,
            activation: self.activation,
            residual_var: self.residual_var.clone(),
            fs: self.fs,
        };
        save_checkpoint(dir, &self.params, &serde_json::to_value(meta)?)
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let (params, meta) = load_checkpoint(dir)?;
        let m: SimpleWavenetMeta = serde_json::from_value(meta)?;
        if m.kind != "simple_wavenet" {
            return Err(Error::Format(format!("checkpoint holds a {} model", m.kind)));
        }
        Ok(Self {
            channels: m.channels,
            hidden: m.hidden,
            layers: m.layers,
            activation: m.activation,
            params,
            residual_var: m.residual_var,
            fs: m.fs,
        })
    }
}

/// Incremental evaluation of a [`SimpleWavenetModel`]: each layer keeps the
/// last `dilation` inputs it has seen, so a step costs one column of work.
#[derive(Clone)]
pub struct WavenetStepper<'m> {
    model: &'m SimpleWavenetModel,
    rings: Vec<Vec<f64>>,
    pos: Vec<usize>,
    seen: usize,
    h: Vec<f64>,
    next: Vec<f64>,
}

impl<'m> WavenetStepper<'m> {
    fn new(model: &'m SimpleWavenetModel) -> Self {
        let hd = model.hidden;
        Self {
            model,
            rings: (0..model.layers).map(|l| vec![0.0; (1 << l) * hd]).collect(),
            pos: vec![0; model.layers],
            seen: 0,
            h: vec![0.0; hd],
            next: vec![0.0; hd],
        }
    }

    /// Whether enough samples were pushed for outputs to equal the batch
    /// network's.
    pub fn warmed_up(&self) -> bool {
        self.seen + 1 >= self.model.receptive_field()
    }

    /// Feeds one sample and returns the prediction of the next.
    pub fn push(&mut self, x: &[f64], out: &mut [f64]) {
        let m = self.model;
        let (c, hd) = (m.channels, m.hidden);
        let p = &m.params;
        let (iw, ib) = (&p.get("in.w").unwrap().data, &p.get("in.b").unwrap().data);
        for o in 0..hd {
            let mut s = ib[o];
            for i in 0..c {
                s += iw[o * c + i] * x[i];
            }
            self.h[o] = s;
        }
        for l in 0..m.layers {
            let d = 1 << l;
            let w = &p.value(2 + 2 * l).data;
            let b = &p.value(3 + 2 * l).data;
            let slot = self.pos[l] * hd;
            let ring = &mut self.rings[l];
            for o in 0..hd {
                let mut s = b[o];
                let row = &w[o * hd * 2..(o + 1) * hd * 2];
                for i in 0..hd {
                    s += row[2 * i] * ring[slot + i] + row[2 * i + 1] * self.h[i];
                }
                self.next[o] = m.activation.apply(s);
            }
            ring[slot..slot + hd].copy_from_slice(&self.h);
            self.pos[l] = (self.pos[l] + 1) % d;
            std::mem::swap(&mut self.h, &mut self.next);
        }
        let (ow, ob) = (&p.get("out.w").unwrap().data, &p.get("out.b").unwrap().data);
        for ch in 0..c {
            let mut s = ob[ch];
            for i in 0..hd {
                s += ow[ch * hd + i] * self.h[i];
            }
            out[ch] = s;
        }
        self.seen += 1;
    }
}

impl Forecaster for SimpleWavenetModel {
    fn history(&self) -> usize {
        self.receptive_field()
    }

    fn forecast(&self, x: ArrayView2<'_, f64>, start: usize, horizon: usize) -> Array2<f64> {
        let c = self.channels;
        let r = self.receptive_field();
        assert!(start >= r, "forecast start {start} has less than {r} samples of history");
        let mut st = self.stepper();
        let mut buf = vec![0.0; c];
        let mut col = vec![0.0; c];
        for t in start - r..start {
            for ch in 0..c {
                col[ch] = x[[ch, t]];
            }
            st.push(&col, &mut buf);
        }
        let mut out = Array2::zeros((c, horizon));
        for h in 0..horizon {
            for ch in 0..c {
                out[[ch, h]] = buf[ch];
            }
            if h + 1 < horizon {
                col.copy_from_slice(&buf);
                st.push(&col, &mut buf);
            }
        }
        out
    }
}

/// Trains a SimpleWavenet on a (standardised) series with next-step MSE and
/// Adam; the last `val_fraction` of the series is held out for early
/// stopping and the best epoch's parameters are kept.
pub fn train_simple_wavenet(series: &MultichannelSeries, config: &SimpleWavenetConfig) -> Result<(SimpleWavenetModel, TrainReport)> {
    let c = series.channels();
    let s = &config.schedule;
    let hidden = config.hidden.unwrap_or(2 * c);
    let mut model = SimpleWavenetModel::new(c, hidden, config.layers, config.activation, series.fs(), derive_seed(s.seed, 0));
    let r = model.receptive_field();
    let win = r - 1 + s.segment;
    let t = series.timesteps();
    let split = split_point(t, s.val_fraction, win + 1)?;
    let x = series.view();
    let train = x.slice(ndarray::s![.., ..split]);
    let val = x.slice(ndarray::s![.., split..]);
    let mut opt = OptimState::adam(s.lr);
    let mut rng = rng_from(derive_seed(s.seed, 1));
    let mut report = TrainReport::default();
    let mut best = model.params.clone();
    let span = split - win;
    for epoch in 0..s.max_epochs {
        let mut starts = epoch_starts(span, s.segment, &mut rng);
        if let Some(cap) = s.steps_per_epoch {
            starts.truncate(cap * s.batch);
        }
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in starts.chunks(s.batch) {
            let b = batch.len();
            let mut inp = Vec::with_capacity(b * c * win);
            let mut tgt = Vec::with_capacity(b * c * s.segment);
            for &st in batch {
                for ch in 0..c {
                    inp.extend((st..st + win).map(|i| train[[ch, i]]));
                }
                for ch in 0..c {
                    tgt.extend((st + r..st + r + s.segment).map(|i| train[[ch, i]]));
                }
            }
            let target = Tensor::from_vec(&[b, c, s.segment], tgt)?;
            let mut g = Graph::training(&model.params, derive_seed(s.seed, 1000 + epoch as u64));
            let xv = g.input(Tensor::from_vec(&[b, c, win], inp)?);
            let y = model.forward(&mut g, xv)?;
            let y = g.crop_time(y, 0, s.segment)?;
            let loss = g.mse(y, &target)?;
            let lv = g.value(loss).data[0];
            if !lv.is_finite() {
                return Err(Error::Numerics(format!("training loss became {lv} in epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            drop(g);
            opt.step(&mut model.params, &grads)?;
            loss_sum += lv;
            steps += 1;
        }
        let train_loss = loss_sum / steps.max(1) as f64;
        let val_loss = if split < t { model.one_step_mse(val)? } else { train_loss };
        log::info!("simple wavenet epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if report.record(train_loss, val_loss) {
            best = model.params.clone();
        }
        if s.patience.is_some_and(|p| report.since_best() >= p) {
            break;
        }
    }
    model.params = best;
    let pred = model.predict(train)?;
    model.residual_var = (0..c)
        .map(|ch| {
            let n = split - r;
            (0..n).map(|j| (pred[[ch, j]] - train[[ch, j + r]]).powi(2)).sum::<f64>() / n.max(1) as f64
        })
        .collect();
    Ok((model, report))
}

/// Recursive generation from a primer of at least `R` columns. Each step
/// feeds back the prediction plus Gaussian innovations with the model's
/// residual variance times `noise_scale^2`; the returned series has
/// `steps` generated columns only.
pub fn generate_simple(
    model: &SimpleWavenetModel,
    primer: ArrayView2<'_, f64>,
    steps: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<MultichannelSeries> {
    let c = model.channels;
    let r = model.receptive_field();
    if primer.nrows() != c || primer.ncols() < r {
        return Err(Error::shape(format!("primer must be {c} x >= {r}, got {:?}", primer.dim())));
    }
    let sd: Vec<f64> = model.residual_var.iter().map(|v| v.sqrt() * noise_scale).collect();
    let mut rng = rng_from(seed);
    let mut st = model.stepper();
    let mut buf = vec![0.0; c];
    let mut col = vec![0.0; c];
    for t in primer.ncols() - r..primer.ncols() {
        for ch in 0..c {
            col[ch] = primer[[ch, t]];
        }
        st.push(&col, &mut buf);
    }
    let mut out = Array2::zeros((c, steps));
    for k in 0..steps {
        for ch in 0..c {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = buf[ch] + sd[ch] * z;
            if !(v.abs() <= DIVERGENCE_GUARD) {
                return Err(Error::Divergence { step: k, value: v });
            }
            col[ch] = v;
            out[[ch, k]] = v;
        }
        st.push(&col, &mut buf);
    }
    MultichannelSeries::new(out, model.fs)
}

/// Decoding rule applied to next-token logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum SamplingStrategy {
    Argmax,
    TopK(usize),
    TopP(f64),
    Full,
}

impl SamplingStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingStrategy::TopK(0) => Err(Error::Config("top-k needs k >= 1".into())),
            SamplingStrategy::TopP(p) if !(p > 0.0 && p <= 1.0) => Err(Error::Config(format!("top-p needs 0 < p <= 1, got {p}"))),
            _ => Ok(()),
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Tokens the strategy may emit, with renormalised probabilities, in
/// descending probability order (ties by lower index).
pub fn candidates(logits: &[f64], strategy: SamplingStrategy) -> Vec<(usize, f64)> {
    let p = softmax(logits);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let keep = match strategy {
        SamplingStrategy::Argmax => 1,
        SamplingStrategy::TopK(k) => k.min(p.len()),
        SamplingStrategy::Full => p.len(),
        SamplingStrategy::TopP(q) => {
            // Smallest prefix whose mass reaches q; the crossing token is kept.
            let mut acc = 0.0;
            let mut n = 0;
            for &i in &order {
                acc += p[i];
                n += 1;
                if acc >= q - 1e-12 {
                    break;
                }
            }
            n
        }
    };
    let kept = &order[..keep.max(1)];
    let z: f64 = kept.iter().map(|&i| p[i]).sum();
    kept.iter().map(|&i| (i, p[i] / z)).collect()
}

/// Draws the next token under `strategy`.
pub fn sample_next(logits: &[f64], strategy: SamplingStrategy, rng: &mut Rng) -> usize {
    let c = candidates(logits, strategy);
    if c.len() == 1 {
        return c[0].0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &c {
        acc += p;
        if u < acc {
            return i;
        }
    }
    c[c.len() - 1].0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizedWavenetConfig {
    /// Token embedding size per channel.
    pub embed_dim: usize,
    /// Residual (and gate) width.
    pub hidden: usize,
    /// Skip width.
    pub skip: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    /// Dropout on the residual stream between layers.
    pub dropout: f64,
    /// Ablation: identity activations, and the gate is dropped so the
    /// stack is linear up to the output softmax.
    pub linear: bool,
    /// Learn a `C x C` mixing of the skip sums across channels.
    pub mix_channels: bool,
    /// Number of task conditions (0 disables condition embeddings).
    pub conditions: usize,
    pub condition_dim: usize,
    /// Number of subjects (0 disables subject embeddings).
    pub subjects: usize,
    pub subject_dim: usize,
    pub schedule: TrainSchedule,
}

impl Default for QuantizedWavenetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 128,
            skip: 512,
            blocks: 2,
            layers_per_block: 7,
            dropout: 0.2,
            linear: false,
            mix_channels: false,
            conditions: 0,
            condition_dim: 8,
            subjects: 0,
            subject_dim: 8,
            schedule: TrainSchedule::default(),
        }
    }
}

impl QuantizedWavenetConfig {
    pub fn receptive_field(&self) -> usize {
        self.blocks * ((1 << self.layers_per_block) - 1) + 1
    }

    fn n_layers(&self) -> usize {
        self.blocks * self.layers_per_block
    }

    fn dilation(&self, j: usize) -> usize {
        1 << (j % self.layers_per_block)
    }

    fn cond_width(&self) -> usize {
        (if self.conditions > 0 { self.condition_dim } else { 0 }) + (if self.subjects > 0 { self.subject_dim } else { 0 })
    }
}

/// Gated Wavenet over per-channel token sequences; channels are processed
/// as independent batch rows sharing weights (apart from the per-channel
/// embedding tables and the optional mixing layer).
///
/// Layer `j` computes `Z = tanh(W_f * H + V_f c) . sigmoid(W_g * H + V_g c)`,
/// feeds `H + W_r Z` to the next layer and `W_s Z` to the skip sum; the head
/// is `W_o relu(W_y relu(sum skips))`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWavenetModel {
    pub config: QuantizedWavenetConfig,
    pub channels: usize,
    pub q: usize,
    pub quantizer: Quantizer,
    pub params: ParamStore,
}

/// Per-sample side information of one batch row.
#[derive(Debug, Clone, Default)]
pub struct RowContext {
    /// Condition index per input sample (`None` when no stimulus).
    pub conditions: Option<Vec<Option<usize>>>,
    pub subject: Option<usize>,
}

impl QuantizedWavenetModel {
    pub fn new(config: QuantizedWavenetConfig, quantizer: Quantizer, seed: u64) -> Self {
        let c = quantizer.channels();
        let q = quantizer.q;
        let (e, h, s) = (config.embed_dim, config.hidden, config.skip);
        let mut rng = rng_from(seed);
        let mut p = ParamStore::new();
        p.add_xavier("emb", &[c * q, e], q, e, &mut rng);
        p.add_xavier("in.w", &[h, e, 1], e, h, &mut rng);
        p.add_zeros("in.b", &[h]);
        let cw = config.cond_width();
        for j in 0..config.n_layers() {
            p.add_xavier(&format!("l{j}.f.w"), &[h, h, 2], 2 * h, 2 * h, &mut rng);
            p.add_zeros(&format!("l{j}.f.b"), &[h]);
            if !config.linear {
                p.add_xavier(&format!("l{j}.g.w"), &[h, h, 2], 2 * h, 2 * h, &mut rng);
                p.add_zeros(&format!("l{j}.g.b"), &[h]);
            }
            if cw > 0 {
                p.add_xavier(&format!("l{j}.cf.w"), &[h, cw, 1], cw, h, &mut rng);
                if !config.linear {
                    p.add_xavier(&format!("l{j}.cg.w"), &[h, cw, 1], cw, h, &mut rng);
                }
            }
            p.add_xavier(&format!("l{j}.r.w"), &[h, h, 1], h, h, &mut rng);
            p.add_zeros(&format!("l{j}.r.b"), &[h]);
            p.add_xavier(&format!("l{j}.s.w"), &[s, h, 1], h, s, &mut rng);
            p.add_zeros(&format!("l{j}.s.b"), &[s]);
        }
        if config.conditions > 0 {
            p.add_xavier("cond", &[config.conditions, config.condition_dim], config.conditions, config.condition_dim, &mut rng);
        }
        if config.subjects > 0 {
            p.add_xavier("subj", &[config.subjects, config.subject_dim], config.subjects, config.subject_dim, &mut rng);
        }
        if config.mix_channels {
            let mut eye = Tensor::zeros(&[c, c]);
            for i in 0..c {
                eye.data[i * c + i] = 1.0;
            }
            p.add("mix", eye);
        }
        p.add_xavier("y.w", &[s, s, 1], s, s, &mut rng);
        p.add_zeros("y.b", &[s]);
        p.add_xavier("o.w", &[q, s, 1], s, q, &mut rng);
        p.add_zeros("o.b", &[q]);
        Self { config, channels: c, q, quantizer, params: p }
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field()
    }

    fn act(&self, kind: Activation) -> Activation {
        if self.config.linear { Activation::Identity } else { kind }
    }

    /// Records the network on `tokens` laid out `[rows, T]` with row `r`
    /// belonging to channel `r % C`. Returns logits `[rows, Q, T - R + 1]`;
    /// column `j` predicts the token after input `j + R - 1`.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], rows: usize, ctx: &[RowContext]) -> Result<Var> {
        let cfg = &self.config;
        let c = self.channels;
        if !rows.is_multiple_of(c) || !tokens.len().is_multiple_of(rows) {
            return Err(Error::shape(format!("{rows} rows of {} tokens do not tile {c} channels", tokens.len())));
        }
        let t = tokens.len() / rows;
        if let Some(&bad) = tokens.iter().find(|&&k| k >= self.q) {
            return Err(Error::Token { token: bad, bins: self.q });
        }
        let ids = tokens.iter().enumerate().map(|(i, &k)| Some((i / t) % c * self.q + k)).collect();
        let emb = g.p("emb")?;
        let x = g.embedding(emb, ids, rows)?;
        let (w, b) = (g.p("in.w")?, g.p("in.b")?);
        let mut h = g.conv1d(x, w, Some(b), 1)?;
        let hc = self.context(g, rows, t, ctx)?;
        let mut skips = Vec::with_capacity(cfg.n_layers());
        for j in 0..cfg.n_layers() {
            let d = cfg.dilation(j);
            let len = g.shape(h)[2] - d;
            let (fw, fb) = (g.p(&format!("l{j}.f.w"))?, g.p(&format!("l{j}.f.b"))?);
            let mut f = g.conv1d(h, fw, Some(fb), d)?;
            let hc_j = match hc {
                Some(v) => Some(g.crop_last(v, len)?),
                None => None,
            };
            if let Some(cv) = hc_j {
                let w = g.p(&format!("l{j}.cf.w"))?;
                let add = g.conv1d(cv, w, None, 1)?;
                f = g.add(f, add)?;
            }
            let z = if cfg.linear {
                f
            } else {
                let (gw, gb) = (g.p(&format!("l{j}.g.w"))?, g.p(&format!("l{j}.g.b"))?);
                let mut gate = g.conv1d(h, gw, Some(gb), d)?;
                if let Some(cv) = hc_j {
                    let w = g.p(&format!("l{j}.cg.w"))?;
                    let add = g.conv1d(cv, w, None, 1)?;
                    gate = g.add(gate, add)?;
                }
                let a = g.act(f, Activation::Tanh);
                let s = g.act(gate, Activation::Sigmoid);
                g.mul(a, s)?
            };
            let (sw, sb) = (g.p(&format!("l{j}.s.w"))?, g.p(&format!("l{j}.s.b"))?);
            skips.push(g.conv1d(z, sw, Some(sb), 1)?);
            let (rw, rb) = (g.p(&format!("l{j}.r.w"))?, g.p(&format!("l{j}.r.b"))?);
            let r = g.conv1d(z, rw, Some(rb), 1)?;
            let hp = g.crop_last(h, len)?;
            h = g.add(hp, r)?;
            h = g.dropout(h, cfg.dropout)?;
        }
        let out_len = g.shape(h)[2];
        let mut sum = g.crop_last(skips[0], out_len)?;
        for &s in &skips[1..] {
            let s = g.crop_last(s, out_len)?;
            sum = g.add(sum, s)?;
        }
        if cfg.mix_channels {
            let m = g.p("mix")?;
            sum = g.mix_rows(sum, m)?;
        }
        let a = g.act(sum, self.act(Activation::Relu));
        let (yw, yb) = (g.p("y.w")?, g.p("y.b")?);
        let y = g.conv1d(a, yw, Some(yb), 1)?;
        let y = g.act(y, self.act(Activation::Relu));
        let (ow, ob) = (g.p("o.w")?, g.p("o.b")?);
        g.conv1d(y, ow, Some(ob), 1)
    }

    /// Concatenated condition / subject embeddings `[rows, Ec, T]`.
    fn context(&self, g: &mut Graph, rows: usize, t: usize, ctx: &[RowContext]) -> Result<Option<Var>> {
        let cfg = &self.config;
        if cfg.cond_width() == 0 {
            return Ok(None);
        }
        let row_ctx = |r: usize| ctx.get(r).or(ctx.first());
        let mut parts = Vec::new();
        if cfg.conditions > 0 {
            let mut ids = Vec::with_capacity(rows * t);
            for r in 0..rows {
                match row_ctx(r).and_then(|c| c.conditions.as_ref()) {
                    Some(cs) => {
                        if cs.len() != t {
                            return Err(Error::shape(format!("condition timecourse has {} samples, tokens {t}", cs.len())));
                        }
                        for &k in cs {
                            if let Some(k) = k {
                                if k >= cfg.conditions {
                                    return Err(Error::Condition { index: k, count: cfg.conditions });
                                }
                            }
                            ids.push(k);
                        }
                    }
                    None => ids.extend(std::iter::repeat_n(None, t)),
                }
            }
            let tab = g.p("cond")?;
            parts.push(g.embedding(tab, ids, rows)?);
        }
        if cfg.subjects > 0 {
            let mut ids = Vec::with_capacity(rows * t);
            for r in 0..rows {
                let s = row_ctx(r).and_then(|c| c.subject);
                if let Some(s) = s {
                    if s >= cfg.subjects {
                        return Err(Error::Index(format!("subject {s} outside {} subjects", cfg.subjects)));
                    }
                }
                ids.extend(std::iter::repeat_n(s, t));
            }
            let tab = g.p("subj")?;
            parts.push(g.embedding(tab, ids, rows)?);
        }
        let mut v = parts[0];
        for &p in &parts[1..] {
            v = g.concat_channels(v, p)?;
        }
        Ok(Some(v))
    }

    /// Log-probabilities `[C][Q]` per predicted column of `tokens` (`C x T`),
    /// i.e. for targets at columns `R..=T` (the last one lies past the end).
    pub fn log_probs(&self, tokens: &Array2<usize>, ctx: &RowContext) -> Result<Vec<Vec<Vec<f64>>>> {
        let (c, t) = tokens.dim();
        let r = self.receptive_field();
        if c != self.channels || t < r {
            return Err(Error::shape(format!("expected {} x >= {r} tokens, got {c} x {t}", self.channels)));
        }
        let n_out = t - r + 1;
        let chunk = 4096;
        let mut out = vec![vec![Vec::new(); c]; n_out];
        let mut o = 0;
        while o < n_out {
            let len = chunk.min(n_out - o);
            let span = o..o + len + r - 1;
            let toks: Vec<usize> = (0..c).flat_map(|ch| span.clone().map(move |i| (ch, i))).map(|(ch, i)| tokens[[ch, i]]).collect();
            let sub_ctx = RowContext {
                conditions: ctx.conditions.as_ref().map(|cs| cs[span.clone()].to_vec()),
                subject: ctx.subject,
            };
            let mut g = Graph::new(&self.params);
            let logits = self.forward(&mut g, &toks, c, std::slice::from_ref(&sub_ctx))?;
            let lv = &g.value(logits).data;
            let mut col = vec![0.0; self.q];
            for ch in 0..c {
                for j in 0..len {
                    for k in 0..self.q {
                        col[k] = lv[(ch * self.q + k) * len + j];
                    }
                    out[o + j][ch] = log_softmax(&col);
                }
            }
            o += len;
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "quantized_wavenet",
            "config": self.config,
            "quantizer": self.quantizer,
        });
        save_checkpoint(dir, &self.params, &meta)
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let (params, meta) = load_checkpoint(dir)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("quantized_wavenet") {
            return Err(Error::Format("checkpoint does not hold a quantized wavenet".into()));
        }
        let config: QuantizedWavenetConfig = serde_json::from_value(meta["config"].clone())?;
        let quantizer: Quantizer = serde_json::from_value(meta["quantizer"].clone())?;
        Ok(Self { channels: quantizer.channels(), q: quantizer.q, config, quantizer, params })
    }
}

/// Trains a quantized Wavenet with next-token cross-entropy. `conditions`
/// is aligned with the token columns (`None` where no stimulus is present);
/// `subject` tags the whole series. The last `val_fraction` is held out.
pub fn train_quantized_wavenet(
    q: &QuantizedSeries,
    config: &QuantizedWavenetConfig,
    conditions: Option<&[Option<usize>]>,
    subject: Option<usize>,
) -> Result<(QuantizedWavenetModel, TrainReport)> {
    q.validate()?;
    let s = &config.schedule;
    let t = q.timesteps();
    if let Some(cs) = conditions {
        if cs.len() != t {
            return Err(Error::shape(format!("condition timecourse has {} samples, series {t}", cs.len())));
        }
        if config.conditions == 0 {
            return Err(Error::Config("condition timecourse given but the model has no condition embeddings".into()));
        }
        if let Some(&bad) = cs.iter().flatten().find(|&&k| k >= config.conditions) {
            return Err(Error::Condition { index: bad, count: config.conditions });
        }
    }
    let mut model = QuantizedWavenetModel::new(config.clone(), q.quantizer.clone(), derive_seed(s.seed, 0));
    let c = model.channels;
    let r = model.receptive_field();
    let win = r - 1 + s.segment;
    let split = split_point(t, s.val_fraction, win + 1)?;
    let mut opt = OptimState::adam(s.lr);
    let mut rng = rng_from(derive_seed(s.seed, 1));
    let mut report = TrainReport::default();
    let mut best = model.params.clone();
    let span = split - win;
    let val_tokens = q.tokens.slice(ndarray::s![.., split..]).to_owned();
    let val_ctx = RowContext { conditions: conditions.map(|cs| cs[split..].to_vec()), subject };
    for epoch in 0..s.max_epochs {
        let mut starts = epoch_starts(span, s.segment, &mut rng);
        if let Some(cap) = s.steps_per_epoch {
            starts.truncate(cap * s.batch);
        }
        let (mut loss_sum, mut steps) = (0.0, 0);
        for (bi, batch) in starts.chunks(s.batch).enumerate() {
            let rows = batch.len() * c;
            let mut toks = Vec::with_capacity(rows * win);
            let mut targets = Vec::with_capacity(rows * s.segment);
            let mut ctx = Vec::with_capacity(rows);
            for &st in batch {
                for ch in 0..c {
                    toks.extend((st..st + win).map(|i| q.tokens[[ch, i]]));
                    targets.extend((st + r..st + r + s.segment).map(|i| q.tokens[[ch, i]]));
                    ctx.push(RowContext { conditions: conditions.map(|cs| cs[st..st + win].to_vec()), subject });
                }
            }
            let seed = derive_seed(s.seed, (epoch as u64) << 32 | bi as u64);
            let mut g = Graph::training(&model.params, seed);
            let logits = model.forward(&mut g, &toks, rows, &ctx)?;
            let logits = g.crop_time(logits, 0, s.segment)?;
            let loss = g.softmax_cross_entropy(logits, &targets)?;
            let lv = g.value(loss).data[0];
            if !lv.is_finite() {
                return Err(Error::Numerics(format!("training loss became {lv} in epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            drop(g);
            opt.step(&mut model.params, &grads)?;
            loss_sum += lv;
            steps += 1;
        }
        let train_loss = loss_sum / steps.max(1) as f64;
        let val_loss = if split < t { cross_entropy(&model, &val_tokens, &val_ctx)? } else { train_loss };
        log::info!("quantized wavenet epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if report.record(train_loss, val_loss) {
            best = model.params.clone();
        }
        if s.patience.is_some_and(|p| report.since_best() >= p) {
            break;
        }
    }
    model.params = best;
    Ok((model, report))
}

/// Mean next-token cross-entropy over the predictable columns of `tokens`.
pub fn cross_entropy(model: &QuantizedWavenetModel, tokens: &Array2<usize>, ctx: &RowContext) -> Result<f64> {
    let r = model.receptive_field();
    let lp = model.log_probs(tokens, ctx)?;
    let t = tokens.ncols();
    let mut s = 0.0;
    for j in 0..t - r {
        for ch in 0..model.channels {
            s -= lp[j][ch][tokens[[ch, j + r]]];
        }
    }
    Ok(s / ((t - r) * model.channels).max(1) as f64)
}

/// Next-step quality of a tokenised predictor. MSE is measured between
/// mu-law-decoded values in `[-1, 1]` (before the max-abs rescale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenMetrics {
    pub top1: f64,
    pub top5: f64,
    pub mse: f64,
    pub count: usize,
}

/// Decoded value of a token in `[-1, 1]`.
pub fn unit_value(token: usize, q: usize, mu: f64) -> f64 {
    crate::quant::mulaw_inverse(crate::quant::bin_center(token, q), mu)
}

/// Wavenet metrics on `tokens`; the reconstruction is the
/// probability-weighted mean of the decoded bin values.
pub fn wavenet_metrics(model: &QuantizedWavenetModel, tokens: &Array2<usize>, ctx: &RowContext) -> Result<TokenMetrics> {
    let r = model.receptive_field();
    let (q, mu) = (model.q, model.quantizer.mu);
    let values: Vec<f64> = (0..q).map(|k| unit_value(k, q, mu)).collect();
    let lp = model.log_probs(tokens, ctx)?;
    let t = tokens.ncols();
    let (mut top1, mut top5, mut se, mut n) = (0usize, 0usize, 0.0, 0usize);
    for j in 0..t - r {
        for ch in 0..model.channels {
            let target = tokens[[ch, j + r]];
            let l = &lp[j][ch];
            let rank = l.iter().enumerate().filter(|&(k, &v)| v > l[target] || (v == l[target] && k < target)).count();
            top1 += usize::from(rank == 0);
            top5 += usize::from(rank < 5);
            let mean: f64 = l.iter().zip(&values).map(|(lv, v)| lv.exp() * v).sum();
            se += (mean - values[target]).powi(2);
            n += 1;
        }
    }
    let nf = n.max(1) as f64;
    Ok(TokenMetrics { top1: top1 as f64 / nf, top5: top5 as f64 / nf, mse: se / nf, count: n })
}

/// Repeat-last-token baseline over columns `from..T`.
pub fn repeat_metrics(tokens: &Array2<usize>, q: usize, mu: f64, from: usize) -> TokenMetrics {
    let (c, t) = tokens.dim();
    let (mut hit, mut se, mut n) = (0usize, 0.0, 0usize);
    for j in from.max(1)..t {
        for ch in 0..c {
            let (prev, cur) = (tokens[[ch, j - 1]], tokens[[ch, j]]);
            hit += usize::from(prev == cur);
            se += (unit_value(prev, q, mu) - unit_value(cur, q, mu)).powi(2);
            n += 1;
        }
    }
    let nf = n.max(1) as f64;
    let top1 = hit as f64 / nf;
    TokenMetrics { top1, top5: f64::NAN, mse: se / nf, count: n }
}

/// Decoded `[-1, 1]` values of a token matrix as a series.
pub fn decoded_series(tokens: &Array2<usize>, q: usize, mu: f64, fs: f64) -> Result<MultichannelSeries> {
    MultichannelSeries::new(tokens.mapv(|k| unit_value(k, q, mu)), fs)
}

/// Univariate AR baseline fitted on decoded values; accuracy uses the bin
/// nearest the (clamped) prediction.
pub fn ar_token_metrics(ar: &ArModel, tokens: &Array2<usize>, q: usize, mu: f64, from: usize) -> Result<TokenMetrics> {
    let fs = ar.fs;
    let x = decoded_series(tokens, q, mu, fs)?;
    let p = ar.order;
    let from = from.max(p);
    let pred = ar.predict_one_step(x.view());
    let (c, t) = tokens.dim();
    let (mut hit, mut se, mut n) = (0usize, 0.0, 0usize);
    for j in from..t {
        for ch in 0..c {
            let v = pred[[ch, j - p]].clamp(-1.0, 1.0);
            let tok = crate::quant::token_of(crate::quant::mulaw_forward(v, mu), q);
            hit += usize::from(tok == tokens[[ch, j]]);
            se += (v - x.data()[[ch, j]]).powi(2);
            n += 1;
        }
    }
    let nf = n.max(1) as f64;
    Ok(TokenMetrics { top1: hit as f64 / nf, top5: f64::NAN, mse: se / nf, count: n })
}

/// Incremental evaluation of a [`QuantizedWavenetModel`] across all
/// channels at once.
pub struct QuantizedStepper<'m> {
    model: &'m QuantizedWavenetModel,
    /// Per channel, per layer ring of the last `d` residual inputs.
    rings: Vec<Vec<Vec<f64>>>,
    pos: Vec<usize>,
    w: QWeights<'m>,
}

struct QLayer<'m> {
    f: (&'m [f64], &'m [f64]),
    g: Option<(&'m [f64], &'m [f64])>,
    cf: Option<&'m [f64]>,
    cg: Option<&'m [f64]>,
    r: (&'m [f64], &'m [f64]),
    s: (&'m [f64], &'m [f64]),
}

struct QWeights<'m> {
    emb: &'m [f64],
    inp: (&'m [f64], &'m [f64]),
    layers: Vec<QLayer<'m>>,
    cond: Option<&'m [f64]>,
    subj: Option<&'m [f64]>,
    mix: Option<&'m [f64]>,
    y: (&'m [f64], &'m [f64]),
    o: (&'m [f64], &'m [f64]),
}

/// `out[o] = b[o] + sum_i w[o, i] x[i]` for a `[O, I]` row-major `w`.
fn matvec(w: &[f64], b: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, v) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *v = b.map_or(0.0, |b| b[o]) + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl<'m> QuantizedStepper<'m> {
    pub fn new(model: &'m QuantizedWavenetModel) -> Self {
        let cfg = &model.config;
        let p = &model.params;
        let get = |n: &str| p.get(n).map(|t| t.data.as_slice());
        let pair = |n: &str| (get(&format!("{n}.w")).unwrap(), get(&format!("{n}.b")).unwrap());
        let layers = (0..cfg.n_layers())
            .map(|j| QLayer {
                f: pair(&format!("l{j}.f")),
                g: if cfg.linear { None } else { Some(pair(&format!("l{j}.g"))) },
                cf: get(&format!("l{j}.cf.w")),
                cg: get(&format!("l{j}.cg.w")),
                r: pair(&format!("l{j}.r")),
                s: pair(&format!("l{j}.s")),
            })
            .collect();
        let w = QWeights {
            emb: get("emb").unwrap(),
            inp: pair("in"),
            layers,
            cond: get("cond"),
            subj: get("subj"),
            mix: get("mix"),
            y: pair("y"),
            o: pair("o"),
        };
        let h = cfg.hidden;
        let rings = (0..model.channels)
            .map(|_| (0..cfg.n_layers()).map(|j| vec![0.0; cfg.dilation(j) * h]).collect())
            .collect();
        Self { model, rings, pos: vec![0; cfg.n_layers()], w }
    }

    fn context_vec(&self, cond: Option<usize>, subject: Option<usize>) -> Vec<f64> {
        let cfg = &self.model.config;
        let mut v = Vec::with_capacity(cfg.cond_width());
        if cfg.conditions > 0 {
            let e = cfg.condition_dim;
            match cond {
                Some(k) => v.extend_from_slice(&self.w.cond.unwrap()[k * e..(k + 1) * e]),
                None => v.extend(std::iter::repeat_n(0.0, e)),
            }
        }
        if cfg.subjects > 0 {
            let e = cfg.subject_dim;
            match subject {
                Some(k) => v.extend_from_slice(&self.w.subj.unwrap()[k * e..(k + 1) * e]),
                None => v.extend(std::iter::repeat_n(0.0, e)),
            }
        }
        v
    }

    /// Feeds one token per channel; returns next-token logits `[C][Q]`.
    pub fn push(&mut self, tokens: &[usize], cond: Option<usize>, subject: Option<usize>) -> Vec<Vec<f64>> {
        let m = self.model;
        let cfg = &m.config;
        let (c, q, e, h, s) = (m.channels, m.q, cfg.embed_dim, cfg.hidden, cfg.skip);
        let hc = self.context_vec(cond, subject);
        let act = |kind| m.act(kind);
        let mut skip_sums = vec![vec![0.0; s]; c];
        let (mut hv, mut f, mut gt, mut z, mut tmp, mut sk) = (vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; s]);
        for ch in 0..c {
            let row = (ch * q + tokens[ch]) * e;
            matvec(self.w.inp.0, Some(self.w.inp.1), &self.w.emb[row..row + e], &mut hv);
            for (j, l) in self.w.layers.iter().enumerate() {
                let slot = self.pos[j] * h;
                let ring = &mut self.rings[ch][j];
                let conv2 = |w: &[f64], b: &[f64], out: &mut [f64]| {
                    for o in 0..h {
                        let r = &w[o * h * 2..(o + 1) * h * 2];
                        let mut acc = b[o];
                        for i in 0..h {
                            acc += r[2 * i] * ring[slot + i] + r[2 * i + 1] * hv[i];
                        }
                        out[o] = acc;
                    }
                };
                conv2(l.f.0, l.f.1, &mut f);
                if let Some(cf) = l.cf {
                    matvec(cf, None, &hc, &mut tmp);
                    f.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
                }
                match l.g {
                    Some((gw, gb)) => {
                        conv2(gw, gb, &mut gt);
                        if let Some(cg) = l.cg {
                            matvec(cg, None, &hc, &mut tmp);
                            gt.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
                        }
                        for i in 0..h {
                            z[i] = f[i].tanh() * crate::nnet::sigmoid(gt[i]);
                        }
                    }
                    None => z.copy_from_slice(&f),
                }
                matvec(l.s.0, Some(l.s.1), &z, &mut sk);
                skip_sums[ch].iter_mut().zip(&sk).for_each(|(a, b)| *a += b);
                ring[slot..slot + h].copy_from_slice(&hv);
                matvec(l.r.0, Some(l.r.1), &z, &mut tmp);
                hv.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
        }
        for j in 0..cfg.n_layers() {
            self.pos[j] = (self.pos[j] + 1) % cfg.dilation(j);
        }
        if let Some(mix) = self.w.mix {
            let orig = skip_sums.clone();
            for (i, out) in skip_sums.iter_mut().enumerate() {
                for (k, v) in out.iter_mut().enumerate() {
                    *v = (0..c).map(|jj| mix[i * c + jj] * orig[jj][k]).sum();
                }
            }
        }
        let mut y = vec![0.0; s];
        let mut logits = vec![vec![0.0; q]; c];
        for ch in 0..c {
            let a: Vec<f64> = skip_sums[ch].iter().map(|&v| act(Activation::Relu).apply(v)).collect();
            matvec(self.w.y.0, Some(self.w.y.1), &a, &mut y);
            y.iter_mut().for_each(|v| *v = act(Activation::Relu).apply(*v));
            matvec(self.w.o.0, Some(self.w.o.1), &y, &mut logits[ch]);
        }
        logits
    }
}

/// Options for recursive token generation.
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub steps: usize,
    pub strategy: SamplingStrategy,
    /// Condition for each generated step (applied to that step's newest
    /// input); shorter or missing means no condition.
    pub conditions: Option<Vec<Option<usize>>>,
    /// Condition labels of the primer columns.
    pub primer_conditions: Option<Vec<Option<usize>>>,
    pub subject: Option<usize>,
    pub seed: u64,
}

/// Recursive generation: prime on `primer` (`C x >= R` tokens, or
/// zero-padded with the centre token when `zero_history`), then sample
/// `steps` tokens per channel.
pub fn generate_quantized(
    model: &QuantizedWavenetModel,
    primer: &Array2<usize>,
    opts: &GenerateOptions,
    zero_history: bool,
) -> Result<Array2<usize>> {
    opts.strategy.validate()?;
    let c = model.channels;
    let r = model.receptive_field();
    if primer.nrows() != c {
        return Err(Error::shape(format!("primer has {} channels, model {c}", primer.nrows())));
    }
    let mut hist: Vec<Vec<usize>> = (0..c).map(|ch| primer.row(ch).to_vec()).collect();
    let mut pcond = opts.primer_conditions.clone().unwrap_or_else(|| vec![None; primer.ncols()]);
    if primer.ncols() < r {
        if !zero_history {
            return Err(Error::shape(format!("primer of {} samples is shorter than the receptive field {r}", primer.ncols())));
        }
        let pad = r - primer.ncols();
        for hrow in &mut hist {
            let mut v = vec![model.q / 2; pad];
            v.extend_from_slice(hrow);
            *hrow = v;
        }
        let mut v = vec![None; pad];
        v.append(&mut pcond);
        pcond = v;
    }
    let n = hist[0].len();
    let mut st = QuantizedStepper::new(model);
    let mut logits = Vec::new();
    for t in n - r..n {
        let col: Vec<usize> = hist.iter().map(|hrow| hrow[t]).collect();
        logits = st.push(&col, pcond.get(t).copied().flatten(), opts.subject);
    }
    let mut rng = rng_from(opts.seed);
    let mut out = Array2::zeros((c, opts.steps));
    for k in 0..opts.steps {
        let col: Vec<usize> = logits.iter().map(|l| sample_next(l, opts.strategy, &mut rng)).collect();
        for ch in 0..c {
            out[[ch, k]] = col[ch];
        }
        let cond = opts.conditions.as_ref().and_then(|cs| cs.get(k).copied().flatten());
        logits = st.push(&col, cond, opts.subject);
    }
    Ok(out)
}

/// Posterior over conditions for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesPosterior {
    pub posterior: Vec<f64>,
    pub log_likelihood: Vec<f64>,
    /// Running posterior after each scored column.
    pub running: Vec<Vec<f64>>,
    /// Some probability underflowed and was floored at `LOG_FLOOR`.
    pub floored: bool,
}

/// Smallest normal log-probability used when a model probability is zero.
pub const LOG_FLOOR: f64 = -745.0;

fn normalize_log(lp: &[f64]) -> Vec<f64> {
    let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![f64::NAN; lp.len()];
    }
    let z: f64 = lp.iter().map(|v| (v - m).exp()).sum();
    lp.iter().map(|v| (v - m).exp() / z).collect()
}

/// Bayes-rule decoding of a trial (`C x T` tokens): the condition is set to
/// `i` wherever `active` is true and the log-likelihood of every true token
/// from column `R` on is accumulated under each condition.
pub fn bayes_decode(model: &QuantizedWavenetModel, trial: &Array2<usize>, active: &[bool], priors: &[f64], subject: Option<usize>) -> Result<BayesPosterior> {
    let n = model.config.conditions;
    if n == 0 {
        return Err(Error::Config("model has no condition embeddings".into()));
    }
    if priors.len() != n || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 || priors.iter().any(|&p| p < 0.0) {
        return Err(Error::Normalization(format!("priors {priors:?} are not a distribution over {n} conditions")));
    }
    let t = trial.ncols();
    if active.len() != t {
        return Err(Error::shape(format!("active mask has {} samples, trial {t}", active.len())));
    }
    let r = model.receptive_field();
    let mut floored = false;
    let mut per_cond = Vec::with_capacity(n);
    for i in 0..n {
        let ctx = RowContext { conditions: Some(active.iter().map(|&a| a.then_some(i)).collect()), subject };
        let lp = model.log_probs(trial, &ctx)?;
        let steps: Vec<f64> = (0..t - r)
            .map(|j| {
                (0..model.channels)
                    .map(|ch| {
                        let v = lp[j][ch][trial[[ch, j + r]]];
                        if v < LOG_FLOOR {
                            floored = true;
                            LOG_FLOOR
                        } else {
                            v
                        }
                    })
                    .sum()
            })
            .collect();
        per_cond.push(steps);
    }
    let log_prior: Vec<f64> = priors.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
    let mut acc = log_prior.clone();
    let mut running = Vec::with_capacity(t - r);
    for j in 0..t - r {
        for i in 0..n {
            acc[i] += per_cond[i][j];
        }
        running.push(normalize_log(&acc));
    }
    let log_likelihood: Vec<f64> = per_cond.iter().map(|s| s.iter().sum()).collect();
    let posterior = running.last().cloned().unwrap_or_else(|| normalize_log(&log_prior));
    Ok(BayesPosterior { posterior, log_likelihood, running, floored })
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(n: usize, f: f64, fs: f64) -> MultichannelSeries {
        let v: Vec<f64> = (0..n).map(|t| (2.0 * std::f64::consts::PI * f * t as f64 / fs).sin()).collect();
        MultichannelSeries::from_channel(&v, fs).unwrap()
    }

    #[test]
    fn stepper_matches_batch_network() {
        let m = SimpleWavenetModel::new(2, 4, 4, Activation::Asinh, 100.0, 3);
        let mut rng = rng_from(1);
        let x = Array2::from_shape_fn((2, 60), |_| StandardNormal.sample(&mut rng));
        let batch = m.predict(x.view()).unwrap();
        let mut st = m.stepper();
        let mut buf = vec![0.0; 2];
        for t in 0..60 {
            st.push(&[x[[0, t]], x[[1, t]]], &mut buf);
            if t + 1 >= 16 {
                for ch in 0..2 {
                    assert!((buf[ch] - batch[[ch, t + 1 - 16]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn receptive_field_and_causality() {
        let m = SimpleWavenetModel::new(1, 3, 5, Activation::Asinh, 100.0, 4);
        let r = m.receptive_field();
        let mut rng = rng_from(2);
        let x = Array2::from_shape_fn((1, 80), |_| StandardNormal.sample(&mut rng));
        let base = m.predict(x.view()).unwrap();
        // Output j only sees x[j .. j + r].
        let mut y = x.clone();
        y[[0, 40]] += 5.0;
        let pert = m.predict(y.view()).unwrap();
        for j in 0..base.ncols() {
            let sees = j <= 40 && 40 < j + r;
            assert_eq!(base[[0, j]] == pert[[0, j]], !sees, "column {j}");
        }
    }

    #[test]
    fn learns_noiseless_sinusoid() {
        let series = sine(6000, 7.0, 100.0);
        let cfg = SimpleWavenetConfig {
            layers: 3,
            hidden: Some(4),
            activation: Activation::Asinh,
            schedule: TrainSchedule { lr: 3e-3, max_epochs: 60, segment: 128, batch: 8, patience: Some(5), ..TrainSchedule::default() },
        };
        let (m, report) = train_simple_wavenet(&series, &cfg).unwrap();
        assert!(report.best_val_loss < 1e-4, "{report:?}");
        assert!(m.residual_var[0] < 1e-4);
    }

    #[test]
    fn white_noise_is_irreducible() {
        let mut rng = rng_from(9);
        let v: Vec<f64> = (0..20000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let series = MultichannelSeries::from_channel(&v, 100.0).unwrap();
        let cfg = SimpleWavenetConfig {
            layers: 4,
            hidden: Some(4),
            activation: Activation::Asinh,
            schedule: TrainSchedule { max_epochs: 10, segment: 256, batch: 4, ..TrainSchedule::default() },
        };
        let (m, report) = train_simple_wavenet(&series, &cfg).unwrap();
        let val = series.view().slice(ndarray::s![.., 16000..]).to_owned();
        let var = crate::data::channel_stats(val.view()).1[0].powi(2);
        assert!((report.best_val_loss / var - 1.0).abs() < 0.05, "{} vs {var}", report.best_val_loss);
        let _ = m;
    }

    #[test]
    fn horizon_metrics_of_exact_predictor() {
        let series = sine(400, 5.0, 100.0);
        let (a1, a2) = crate::sim::ar2_coefficients(5.0, 100.0).unwrap();
        let ar = ArModel::univariate(&[vec![a1, a2]], &[0.0], 100.0).unwrap();
        let m = horizon_metrics(&ar, series.view(), 8, 3).unwrap();
        assert!(m.mse.iter().all(|&e| e < 1e-20));
        assert!((m.pred_var[0] / m.target_var - 1.0).abs() < 0.05);
    }

    #[test]
    fn checkpoint_roundtrip_and_generation_determinism() {
        let m = SimpleWavenetModel::new(1, 3, 3, Activation::Tanh, 50.0, 5);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = SimpleWavenetModel::load(dir.path()).unwrap();
        assert_eq!(m, back);
        let primer = Array2::zeros((1, 8));
        let a = generate_simple(&m, primer.view(), 100, 1.0, 7).unwrap();
        let b = generate_simple(&back, primer.view(), 100, 1.0, 7).unwrap();
        assert_eq!(a, b);
    }

    fn small_quantizer(c: usize, q: usize) -> Quantizer {
        let norm = crate::data::NormParams { mean: vec![0.0; c], std: vec![1.0; c], scale: Some(vec![1.0; c]) };
        Quantizer::with_params(q, 255.0, 4.0, norm)
    }

    fn small_config() -> QuantizedWavenetConfig {
        QuantizedWavenetConfig {
            embed_dim: 4,
            hidden: 5,
            skip: 6,
            blocks: 2,
            layers_per_block: 3,
            dropout: 0.0,
            conditions: 2,
            condition_dim: 3,
            subjects: 2,
            subject_dim: 2,
            mix_channels: true,
            ..QuantizedWavenetConfig::default()
        }
    }

    #[test]
    fn top_p_includes_crossing_token() {
        let logits: Vec<f64> = [0.6f64, 0.3, 0.1].iter().map(|p| p.ln()).collect();
        let c = candidates(&logits, SamplingStrategy::TopP(0.8));
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].0, c[1].0), (0, 1));
        assert!((c[0].1 - 2.0 / 3.0).abs() < 1e-12 && (c[1].1 - 1.0 / 3.0).abs() < 1e-12);
        let k = candidates(&logits, SamplingStrategy::TopK(2));
        assert_eq!(k, c);
        assert_eq!(candidates(&logits, SamplingStrategy::TopP(1.0)).len(), 3);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let mut rng = rng_from(0);
        assert_eq!(sample_next(&[0.0, 0.0], SamplingStrategy::Argmax, &mut rng), 0);
        assert_eq!(sample_next(&[1.0, 3.0, 3.0], SamplingStrategy::Argmax, &mut rng), 1);
    }

    #[test]
    fn full_sampling_matches_distribution() {
        let p = [0.5, 0.2, 0.2, 0.1];
        let logits: Vec<f64> = p.iter().map(|v: &f64| v.ln()).collect();
        let mut rng = rng_from(17);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_next(&logits, SamplingStrategy::Full, &mut rng)] += 1;
        }
        for k in 0..4 {
            assert!((counts[k] as f64 / n as f64 - p[k]).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn invalid_strategies_rejected() {
        assert!(SamplingStrategy::TopP(0.0).validate().is_err());
        assert!(SamplingStrategy::TopP(1.5).validate().is_err());
        assert!(SamplingStrategy::TopK(0).validate().is_err());
        assert!(SamplingStrategy::TopP(1.0).validate().is_ok());
    }

    fn random_tokens(c: usize, t: usize, q: usize, seed: u64) -> Array2<usize> {
        let mut rng = rng_from(seed);
        Array2::from_shape_fn((c, t), |_| rng.random_range(0..q))
    }

    #[test]
    fn quantized_stepper_matches_batch() {
        for linear in [false, true] {
            let cfg = QuantizedWavenetConfig { linear, ..small_config() };
            let m = QuantizedWavenetModel::new(cfg, small_quantizer(2, 9), 4);
            let r = m.receptive_field();
            assert_eq!(r, 15);
            let t = 40;
            let toks = random_tokens(2, t, 9, 5);
            let conds: Vec<Option<usize>> = (0..t).map(|i| if i < 20 { None } else { Some(i % 2) }).collect();
            let ctx = RowContext { conditions: Some(conds.clone()), subject: Some(1) };
            let lp = m.log_probs(&toks, &ctx).unwrap();
            assert_eq!(lp.len(), t - r + 1);
            let mut st = QuantizedStepper::new(&m);
            for i in 0..t {
                let logits = st.push(&[toks[[0, i]], toks[[1, i]]], conds[i], Some(1));
                if i + 1 >= r {
                    for ch in 0..2 {
                        let ls = log_softmax(&logits[ch]);
                        for k in 0..9 {
                            assert!((ls[k] - lp[i + 1 - r][ch][k]).abs() < 1e-10, "linear={linear} t={i}");
                        }
                    }
                }
            }
            for col in &lp {
                for ch in col {
                    assert!((ch.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn quantized_receptive_field() {
        let m = QuantizedWavenetModel::new(small_config(), small_quantizer(2, 9), 6);
        let r = m.receptive_field();
        let toks = random_tokens(2, r, 9, 7);
        let ctx = RowContext::default();
        let base = m.log_probs(&toks, &ctx).unwrap();
        let mut wider = Array2::zeros((2, r + 3));
        wider.slice_mut(ndarray::s![.., 3..]).assign(&toks);
        let other = m.log_probs(&wider, &ctx).unwrap();
        assert_eq!(base[0], other[3]);
    }

    #[test]
    fn condition_index_checked() {
        let m = QuantizedWavenetModel::new(small_config(), small_quantizer(2, 9), 6);
        let toks = random_tokens(2, 20, 9, 7);
        let ctx = RowContext { conditions: Some(vec![Some(5); 20]), subject: None };
        assert!(matches!(m.log_probs(&toks, &ctx), Err(Error::Condition { index: 5, count: 2 })));
    }

    #[test]
    fn constant_tokens_drive_cross_entropy_to_zero() {
        let quant = small_quantizer(1, 8);
        let tokens = Array2::from_elem((1, 600), 3usize);
        let qs = QuantizedSeries { tokens, quantizer: quant, fs: 100.0 };
        let cfg = QuantizedWavenetConfig {
            embed_dim: 4,
            hidden: 4,
            skip: 4,
            blocks: 1,
            layers_per_block: 3,
            dropout: 0.0,
            schedule: TrainSchedule { lr: 1e-2, max_epochs: 40, segment: 64, batch: 2, patience: None, ..TrainSchedule::default() },
            ..QuantizedWavenetConfig::default()
        };
        let (m, report) = train_quantized_wavenet(&qs, &cfg, None, None).unwrap();
        assert!(report.best_val_loss < 0.02, "{report:?}");
        let primer = Array2::from_elem((1, 8), 3usize);
        let opts = GenerateOptions { steps: 50, strategy: SamplingStrategy::Argmax, conditions: None, primer_conditions: None, subject: None, seed: 1 };
        let gen = generate_quantized(&m, &primer, &opts, false).unwrap();
        assert!(gen.iter().all(|&k| k == 3));
    }

    #[test]
    fn bayes_decode_symmetry_and_degenerate_prior() {
        let mut m = QuantizedWavenetModel::new(QuantizedWavenetConfig { subjects: 0, ..small_config() }, small_quantizer(2, 9), 8);
        let toks = random_tokens(2, 40, 9, 9);
        let active = vec![true; 40];
        let lopsided = bayes_decode(&m, &toks, &active, &[0.5, 0.5], None).unwrap();
        assert!((lopsided.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = bayes_decode(&m, &toks, &active, &[1.0, 0.0], None).unwrap();
        assert_eq!(p.posterior, vec![1.0, 0.0]);
        // Identical condition embeddings make the likelihoods equal.
        let id = m.params.id("cond").unwrap();
        m.params.value_mut(id).data.iter_mut().for_each(|v| *v = 0.25);
        let p = bayes_decode(&m, &toks, &active, &[0.5, 0.5], None).unwrap();
        assert!((p.posterior[0] - 0.5).abs() < 1e-12);
        assert_eq!(p.running.len(), 40 - m.receptive_field());
        assert!(matches!(bayes_decode(&m, &toks, &active, &[0.7, 0.7], None), Err(Error::Normalization(_))));
    }

    #[test]
    fn quantized_generation_determinism_and_checkpoint() {
        let m = QuantizedWavenetModel::new(small_config(), small_quantizer(2, 9), 10);
        let primer = random_tokens(2, 20, 9, 11);
        let opts = GenerateOptions { steps: 30, strategy: SamplingStrategy::TopP(0.8), conditions: Some(vec![Some(1); 30]), primer_conditions: None, subject: Some(0), seed: 5 };
        let a = generate_quantized(&m, &primer, &opts, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = QuantizedWavenetModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let b = generate_quantized(&back, &primer, &opts, false).unwrap();
        assert_eq!(a, b);
        let short = random_tokens(2, 5, 9, 12);
        assert!(generate_quantized(&m, &short, &opts, false).is_err());
        assert_eq!(generate_quantized(&m, &short, &opts, true).unwrap().ncols(), 30);
    }

    #[test]
    fn repeat_baseline_counts() {
        let toks = Array2::from_shape_vec((1, 5), vec![1, 1, 2, 2, 2]).unwrap();
        let m = repeat_metrics(&toks, 4, 255.0, 1);
        assert_eq!(m.count, 4);
        assert!((m.top1 - 0.75).abs() < 1e-12);
        let d = unit_value(1, 4, 255.0) - unit_value(2, 4, 255.0);
        assert!((m.mse - d * d / 4.0).abs() < 1e-12);
    }
}
