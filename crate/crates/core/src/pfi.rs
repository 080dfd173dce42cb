//! Permutation feature importance: shuffle one feature (a time window, a
//! channel group, a frequency band or a joint block) across trials and
//! measure the accuracy lost, or for kernel PFI the deviation of a single
//! convolution kernel's output.

use std::ops::Range;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::decoders::{Classifier, WavenetClassifierModel, WithSubjects};
use crate::error::{Error, Result};
use crate::forecasters::SimpleWavenetModel;
use crate::nnet::{Graph, Tensor};
use crate::rng::{derive_seed, permutation, rng_from};
use crate::spectral::{irfft, istft_array, rfft, stft_array, PsdEstimate, Welch, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PfiKind {
    Temporal,
    Spatial,
    Spatiotemporal,
    Spectral,
    Temporospectral,
    Spatiospectral,
}

impl PfiKind {
    fn uses_groups(self) -> bool {
        matches!(self, PfiKind::Spatial | PfiKind::Spatiotemporal | PfiKind::Spatiospectral)
    }
}

/// Which features to shuffle and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub kind: PfiKind,
    /// Time window length and stride in samples.
    pub time_len: usize,
    pub time_stride: usize,
    /// Channel groups; empty means one group per channel.
    pub groups: Vec<Vec<usize>>,
    /// Band width in Hz for spectral kinds.
    pub band_hz: f64,
    /// STFT window in samples for the temporo-spectral kind (hop 1,
    /// Hamming).
    pub stft_len: usize,
    /// Temporo-spectral only: also shuffle the neighbouring time window
    /// on each side.
    pub smooth: bool,
    /// Shuffle everything except the feature.
    pub inverse: bool,
}

impl FeatureWindow {
    pub fn new(kind: PfiKind) -> Self {
        Self { kind, time_len: 10, time_stride: 10, groups: Vec::new(), band_hz: 4.0, stft_len: 10, smooth: true, inverse: false }
    }

    pub fn temporal(time_len: usize, time_stride: usize) -> Self {
        Self { time_len, time_stride, ..Self::new(PfiKind::Temporal) }
    }

    pub fn spatial(groups: Vec<Vec<usize>>) -> Self {
        Self { groups, ..Self::new(PfiKind::Spatial) }
    }

    pub fn spectral(band_hz: f64) -> Self {
        Self { band_hz, ..Self::new(PfiKind::Spectral) }
    }

    pub fn inverted(self) -> Self {
        Self { inverse: true, ..self }
    }
}

/// Groups of each channel and its `k - 1` nearest neighbours in 2-D.
pub fn knn_groups(coords: &[(f64, f64)], k: usize) -> Vec<Vec<usize>> {
    (0..coords.len())
        .map(|i| {
            let mut idx: Vec<usize> = (0..coords.len()).collect();
            let d = |j: usize| (coords[i].0 - coords[j].0).powi(2) + (coords[i].1 - coords[j].1).powi(2);
            idx.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            idx.truncate(k.max(1));
            idx.sort_unstable();
            idx
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Region {
    Time(Range<usize>),
    Bins(Range<usize>),
    /// STFT frames and bins.
    Block(Range<usize>, Range<usize>),
}

#[derive(Debug, Clone, PartialEq)]
struct Feature {
    channels: Vec<usize>,
    region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfiResult {
    pub kind: PfiKind,
    pub inverse: bool,
    /// Window centres (ms), group ids or band centres (Hz).
    pub axis1: Vec<f64>,
    /// Second axis of two-dimensional kinds; empty otherwise.
    pub axis2: Vec<f64>,
    /// Mean importance per feature, row-major over `(axis1, axis2)`.
    pub delta: Vec<f64>,
    /// Importance of every feature under every permutation.
    pub raw: Vec<Vec<f64>>,
    /// Unshuffled accuracy (kernel PFI: the kernel output std).
    pub baseline: f64,
    pub n_perm: usize,
}

impl PfiResult {
    pub fn argmax(&self) -> usize {
        (0..self.delta.len()).fold(0, |b, i| if self.delta[i] > self.delta[b] { i } else { b })
    }

    /// Width of the normal 95% interval of feature `j`'s mean.
    pub fn ci_width(&self, j: usize) -> f64 {
        let r = &self.raw[j];
        let n = r.len() as f64;
        if r.len() < 2 {
            return f64::NAN;
        }
        let m = r.iter().sum::<f64>() / n;
        let sd = (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        2.0 * 1.96 * sd / n.sqrt()
    }

    pub fn to_csv_rows(&self) -> Vec<(f64, Option<f64>, usize, f64)> {
        let w = self.axis2.len().max(1);
        let mut rows = Vec::new();
        for (j, raw) in self.raw.iter().enumerate() {
            let a1 = self.axis1[j / w];
            let a2 = self.axis2.get(j % w).copied();
            for (p, &v) in raw.iter().enumerate() {
                rows.push((a1, a2, p, v));
            }
        }
        rows
    }
}

fn time_windows(t: usize, len: usize, stride: usize) -> Result<Vec<Range<usize>>> {
    if len == 0 || stride == 0 || len > t {
        return Err(Error::shape(format!("time window of {len} samples (stride {stride}) on {t}-sample trials")));
    }
    Ok((0..=t - len).step_by(stride).map(|s| s..s + len).collect())
}

/// Bins `[k * df]` grouped into bands `[b * width, (b + 1) * width)` Hz.
fn bands(bins: usize, df: f64, width: f64) -> Result<Vec<(Range<usize>, f64)>> {
    let nyq = (bins - 1) as f64 * df;
    if !(width > 0.0) || width > nyq + df {
        return Err(Error::shape(format!("band of {width} Hz on a {nyq} Hz grid")));
    }
    let mut out = Vec::new();
    let mut b = 0;
    loop {
        let (lo, hi) = (b as f64 * width, (b + 1) as f64 * width);
        if lo > nyq {
            break;
        }
        let r: Vec<usize> = (0..bins).filter(|&k| (k as f64 * df) >= lo - 1e-9 && (k as f64 * df) < hi - 1e-9).collect();
        if let (Some(&a), Some(&z)) = (r.first(), r.last()) {
            out.push((a..z + 1, lo + width / 2.0));
        }
        b += 1;
    }
    Ok(out)
}

fn groups_for(window: &FeatureWindow, c: usize) -> Result<Vec<Vec<usize>>> {
    let g = if window.groups.is_empty() { (0..c).map(|i| vec![i]).collect() } else { window.groups.clone() };
    if let Some(bad) = g.iter().flatten().find(|&&ch| ch >= c) {
        return Err(Error::shape(format!("channel {bad} outside {c} channels")));
    }
    Ok(g)
}

fn features(window: &FeatureWindow, c: usize, t: usize, fs: f64) -> Result<(Vec<Feature>, Vec<f64>, Vec<f64>)> {
    let all: Vec<usize> = (0..c).collect();
    let ms = |r: &Range<usize>| (r.start + r.end) as f64 / 2.0 / fs * 1000.0;
    let groups = if window.kind.uses_groups() { groups_for(window, c)? } else { Vec::new() };
    let gid: Vec<f64> = (0..groups.len()).map(|g| g as f64).collect();
    let mut feats = Vec::new();
    let (a1, a2) = match window.kind {
        PfiKind::Temporal => {
            let w = time_windows(t, window.time_len, window.time_stride)?;
            feats.extend(w.iter().map(|r| Feature { channels: all.clone(), region: Region::Time(r.clone()) }));
            (w.iter().map(ms).collect(), Vec::new())
        }
        PfiKind::Spatial => {
            feats.extend(groups.iter().map(|g| Feature { channels: g.clone(), region: Region::Time(0..t) }));
            (gid, Vec::new())
        }
        PfiKind::Spatiotemporal => {
            let w = time_windows(t, window.time_len, window.time_stride)?;
            for g in &groups {
                feats.extend(w.iter().map(|r| Feature { channels: g.clone(), region: Region::Time(r.clone()) }));
            }
            (gid, w.iter().map(ms).collect())
        }
        PfiKind::Spectral | PfiKind::Spatiospectral => {
            let b = bands(t / 2 + 1, fs / t as f64, window.band_hz)?;
            let centres = b.iter().map(|x| x.1).collect();
            if window.kind == PfiKind::Spectral {
                feats.extend(b.iter().map(|(r, _)| Feature { channels: all.clone(), region: Region::Bins(r.clone()) }));
                (centres, Vec::new())
            } else {
                for g in &groups {
                    feats.extend(b.iter().map(|(r, _)| Feature { channels: g.clone(), region: Region::Bins(r.clone()) }));
                }
                (gid, centres)
            }
        }
        PfiKind::Temporospectral => {
            let w = window.stft_len;
            if w < 2 || w > t {
                return Err(Error::shape(format!("STFT window of {w} samples on {t}-sample trials")));
            }
            let frames = t - w + 1;
            let tw = time_windows(t, window.time_len, window.time_stride)?;
            let b = bands(w / 2 + 1, fs / w as f64, window.band_hz)?;
            for r in &tw {
                // Frames whose centre falls in the window, widened by one
                // window each side when smoothing.
                let (lo, hi) = if window.smooth {
                    (r.start.saturating_sub(r.len()), (r.end + r.len()).min(t))
                } else {
                    (r.start, r.end)
                };
                let half = w / 2;
                let f0 = lo.saturating_sub(half).min(frames);
                let f1 = hi.saturating_sub(half).min(frames).max(f0);
                for (br, _) in &b {
                    feats.push(Feature { channels: all.clone(), region: Region::Block(f0..f1, br.clone()) });
                }
            }
            (tw.iter().map(ms).collect(), b.iter().map(|x| x.1).collect())
        }
    };
    Ok((feats, a1, a2))
}

/// Precomputed transforms shared by every permutation.
enum Cache {
    None,
    /// `[trial][channel]` one-sided spectra.
    Fft(Vec<Vec<Vec<Complex64>>>),
    /// Per-trial STFTs.
    Stft(Vec<crate::spectral::Stft>),
}

fn build_cache(kind: PfiKind, trials: ArrayView3<'_, f64>, fs: f64, stft_len: usize) -> Result<Cache> {
    let (n, c, _) = trials.dim();
    Ok(match kind {
        PfiKind::Spectral | PfiKind::Spatiospectral => Cache::Fft((0..n).map(|i| (0..c).map(|ch| rfft(&trials.slice(ndarray::s![i, ch, ..]).to_vec())).collect()).collect()),
        PfiKind::Temporospectral => Cache::Stft((0..n).map(|i| stft_array(trials.index_axis(Axis(0), i), fs, stft_len, 1, Window::Hamming)).collect::<Result<_>>()?),
        _ => Cache::None,
    })
}

/// Trials with `feature` (or, inverted, everything else) taken from trial
/// `perm[n]` instead of trial `n`.
fn shuffled(trials: ArrayView3<'_, f64>, feature: &Feature, perm: &[usize], inverse: bool, cache: &Cache) -> Result<Array3<f64>> {
    let (n, c, t) = trials.dim();
    let mut in_group = vec![false; c];
    feature.channels.iter().for_each(|&ch| in_group[ch] = true);
    let mut out = trials.to_owned();
    match (&feature.region, cache) {
        (Region::Time(r), _) => {
            for i in 0..n {
                for ch in 0..c {
                    for tt in 0..t {
                        if (in_group[ch] && r.contains(&tt)) != inverse {
                            out[[i, ch, tt]] = trials[[perm[i], ch, tt]];
                        }
                    }
                }
            }
        }
        (Region::Bins(r), Cache::Fft(spec)) => {
            let bins = t / 2 + 1;
            for i in 0..n {
                for ch in 0..c {
                    let mask: Vec<bool> = (0..bins).map(|k| (in_group[ch] && r.contains(&k)) != inverse).collect();
                    let moved = mask.iter().filter(|&&m| m).count();
                    if moved == 0 {
                        continue;
                    }
                    if moved == bins {
                        out.slice_mut(ndarray::s![i, ch, ..]).assign(&trials.slice(ndarray::s![perm[i], ch, ..]));
                        continue;
                    }
                    let s: Vec<Complex64> = (0..bins).map(|k| if mask[k] { spec[perm[i]][ch][k] } else { spec[i][ch][k] }).collect();
                    let x = irfft(&s, t);
                    out.slice_mut(ndarray::s![i, ch, ..]).assign(&ndarray::ArrayView1::from(&x[..]));
                }
            }
        }
        (Region::Block(fr, br), Cache::Stft(z)) => {
            for i in 0..n {
                let (_, frames, bins) = z[i].data.dim();
                let mut mixed = z[i].clone();
                let mut touched = vec![0usize; c];
                for ch in 0..c {
                    for m in 0..frames {
                        for k in 0..bins {
                            if (in_group[ch] && fr.contains(&m) && br.contains(&k)) != inverse {
                                mixed.data[[ch, m, k]] = z[perm[i]].data[[ch, m, k]];
                                touched[ch] += 1;
                            }
                        }
                    }
                }
                if touched.iter().all(|&v| v == 0) {
                    continue;
                }
                let x = istft_array(&mixed)?;
                for ch in 0..c {
                    if touched[ch] == frames * bins {
                        out.slice_mut(ndarray::s![i, ch, ..]).assign(&trials.slice(ndarray::s![perm[i], ch, ..]));
                    } else if touched[ch] > 0 {
                        out.slice_mut(ndarray::s![i, ch, ..]).assign(&x.row(ch));
                    }
                }
            }
        }
        _ => unreachable!("cache matches the feature kind"),
    }
    Ok(out)
}

/// The permutation used for draw `p`; shared by every feature so features
/// are compared under common random numbers.
fn perm_for(n: usize, seed: u64, p: usize) -> Vec<usize> {
    permutation(n, &mut rng_from(derive_seed(seed, p as u64)))
}

fn check_perm(n_perm: usize, n: usize) -> Result<()> {
    if n_perm == 0 {
        return Err(Error::Config("at least one permutation is needed".into()));
    }
    if n < 2 {
        return Err(Error::shape("shuffling needs at least two trials"));
    }
    Ok(())
}

/// Accuracy-loss PFI. `raw[j][p]` is baseline minus the accuracy with
/// feature `j` shuffled under permutation `p`.
pub fn run_pfi(model: &dyn Classifier, trials: ArrayView3<'_, f64>, labels: &[usize], fs: f64, window: &FeatureWindow, n_perm: usize, seed: u64) -> Result<PfiResult> {
    let (n, c, t) = trials.dim();
    check_perm(n_perm, n)?;
    if labels.len() != n {
        return Err(Error::shape(format!("{n} trials but {} labels", labels.len())));
    }
    let baseline = model.accuracy(trials, labels)?;
    let (feats, axis1, axis2) = features(window, c, t, fs)?;
    let cache = build_cache(window.kind, trials, fs, window.stft_len)?;
    let perms: Vec<Vec<usize>> = (0..n_perm).map(|p| perm_for(n, seed, p)).collect();
    let raw = feats
        .par_iter()
        .map(|f| {
            perms
                .iter()
                .map(|perm| {
                    let x = shuffled(trials, f, perm, window.inverse, &cache)?;
                    Ok(baseline - model.accuracy(x.view(), labels)?)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let delta = raw.iter().map(|r| r.iter().sum::<f64>() / n_perm as f64).collect();
    Ok(PfiResult { kind: window.kind, inverse: window.inverse, axis1, axis2, delta, raw, baseline, n_perm })
}

/// Shuffled copy of `trials` for the feature at `index` under draw `p`;
/// exposed for checks of the shuffling semantics.
pub fn shuffle_trials(trials: ArrayView3<'_, f64>, fs: f64, window: &FeatureWindow, index: usize, seed: u64, p: usize) -> Result<Array3<f64>> {
    let (n, c, t) = trials.dim();
    let (feats, _, _) = features(window, c, t, fs)?;
    let f = feats.get(index).ok_or_else(|| Error::Index(format!("feature {index} of {}", feats.len())))?;
    let cache = build_cache(window.kind, trials, fs, window.stft_len)?;
    shuffled(trials, f, &perm_for(n, seed, p), window.inverse, &cache)
}

/// Models whose dilated convolution kernels can be probed one at a time.
pub trait KernelModel: Sync {
    fn input_channels(&self) -> usize;
    /// Fixed trial length, if the model requires one.
    fn trial_len(&self) -> Option<usize>;
    fn kernel_layers(&self) -> usize;
    /// Input to dilated layer `layer`, `[N, C_l, T_l]`.
    fn layer_input(&self, trials: ArrayView3<'_, f64>, layer: usize) -> Result<Array3<f64>>;
    /// Taps `[oldest, newest]` of kernel `(out_ch, in_ch)` and its dilation.
    fn kernel(&self, layer: usize, in_ch: usize, out_ch: usize) -> Result<(Vec<f64>, usize)>;

    /// Bias-free output of one kernel, `[N, T_l - (K - 1) d]`.
    fn kernel_output(&self, trials: ArrayView3<'_, f64>, layer: usize, in_ch: usize, out_ch: usize) -> Result<Array2<f64>> {
        let (taps, d) = self.kernel(layer, in_ch, out_ch)?;
        let h = self.layer_input(trials, layer)?;
        let (n, _, tl) = h.dim();
        let span = (taps.len() - 1) * d;
        if tl <= span {
            return Err(Error::shape(format!("layer input of {tl} samples is shorter than the kernel span")));
        }
        let len = tl - span;
        Ok(Array2::from_shape_fn((n, len), |(i, t)| taps.iter().enumerate().map(|(k, w)| w * h[[i, in_ch, t + k * d]]).sum()))
    }
}

fn kernel_taps(w: &Tensor, in_ch: usize, out_ch: usize, layer: usize) -> Result<(Vec<f64>, usize)> {
    let (cout, cin, k) = (w.shape[0], w.shape[1], w.shape[2]);
    if in_ch >= cin || out_ch >= cout {
        return Err(Error::Index(format!("kernel ({out_ch}, {in_ch}) outside {cout}x{cin} at layer {layer}")));
    }
    Ok((w.data[(out_ch * cin + in_ch) * k..(out_ch * cin + in_ch + 1) * k].to_vec(), 1 << layer))
}

fn check_layer(layer: usize, layers: usize) -> Result<()> {
    if layer >= layers {
        return Err(Error::Index(format!("layer {layer} of {layers}")));
    }
    Ok(())
}

fn classifier_layer_input(model: &WavenetClassifierModel, trials: ArrayView3<'_, f64>, subjects: Option<&[usize]>, layer: usize) -> Result<Array3<f64>> {
    check_layer(layer, model.layers)?;
    let (n, c, t) = trials.dim();
    let mut g = Graph::new(&model.params);
    let mut h = g.input(Tensor::from_vec(&[n, c, t], trials.iter().copied().collect())?);
    if model.subjects > 0 {
        let ids = subjects.ok_or_else(|| Error::Interface("model has subject embeddings; bind subjects first".into()))?;
        let table = g.p("subj")?;
        let e = g.embedding(table, ids.iter().flat_map(|&s| std::iter::repeat_n(Some(s), t)).collect(), n)?;
        h = g.concat_channels(h, e)?;
    }
    for l in 0..layer {
        let (w, b) = (g.p(&format!("c{l}.w"))?, g.p(&format!("c{l}.b"))?);
        h = g.conv1d(h, w, Some(b), 1 << l)?;
        h = g.asinh(h);
    }
    let v = g.value(h);
    Ok(Array3::from_shape_vec((v.shape[0], v.shape[1], v.shape[2]), v.data.clone()).expect("activation shape"))
}

impl KernelModel for WavenetClassifierModel {
    fn input_channels(&self) -> usize {
        self.channels
    }

    fn trial_len(&self) -> Option<usize> {
        Some(self.timesteps)
    }

    fn kernel_layers(&self) -> usize {
        self.layers
    }

    fn layer_input(&self, trials: ArrayView3<'_, f64>, layer: usize) -> Result<Array3<f64>> {
        classifier_layer_input(self, trials, None, layer)
    }

    fn kernel(&self, layer: usize, in_ch: usize, out_ch: usize) -> Result<(Vec<f64>, usize)> {
        check_layer(layer, self.layers)?;
        kernel_taps(self.params.get(&format!("c{layer}.w")).expect("conv weight"), in_ch, out_ch, layer)
    }
}

impl KernelModel for WithSubjects<'_> {
    fn input_channels(&self) -> usize {
        self.model.channels
    }

    fn trial_len(&self) -> Option<usize> {
        Some(self.model.timesteps)
    }

    fn kernel_layers(&self) -> usize {
        self.model.layers
    }

    fn layer_input(&self, trials: ArrayView3<'_, f64>, layer: usize) -> Result<Array3<f64>> {
        classifier_layer_input(self.model, trials, Some(self.subjects), layer)
    }

    fn kernel(&self, layer: usize, in_ch: usize, out_ch: usize) -> Result<(Vec<f64>, usize)> {
        self.model.kernel(layer, in_ch, out_ch)
    }
}

impl KernelModel for SimpleWavenetModel {
    fn input_channels(&self) -> usize {
        self.channels
    }

    fn trial_len(&self) -> Option<usize> {
        None
    }

    fn kernel_layers(&self) -> usize {
        self.layers
    }

    fn layer_input(&self, trials: ArrayView3<'_, f64>, layer: usize) -> Result<Array3<f64>> {
        check_layer(layer, self.layers)?;
        let (n, c, t) = trials.dim();
        let mut g = Graph::new(&self.params);
        let x = g.input(Tensor::from_vec(&[n, c, t], trials.iter().copied().collect())?);
        let (w, b) = (g.p("in.w")?, g.p("in.b")?);
        let mut h = g.conv1d(x, w, Some(b), 1)?;
        for l in 0..layer {
            let (w, b) = (g.p(&format!("l{l}.w"))?, g.p(&format!("l{l}.b"))?);
            h = g.conv1d(h, w, Some(b), 1 << l)?;
            h = g.act(h, self.activation);
        }
        let v = g.value(h);
        Ok(Array3::from_shape_vec((v.shape[0], v.shape[1], v.shape[2]), v.data.clone()).expect("activation shape"))
    }

    fn kernel(&self, layer: usize, in_ch: usize, out_ch: usize) -> Result<(Vec<f64>, usize)> {
        check_layer(layer, self.layers)?;
        kernel_taps(self.params.get(&format!("l{layer}.w")).expect("layer weight"), in_ch, out_ch, layer)
    }
}

/// Kernel PFI: mean absolute change of one kernel's output when a feature
/// is shuffled, optionally divided by the output's standard deviation.
#[allow(clippy::too_many_arguments)]
pub fn kernel_pfi(
    model: &dyn KernelModel,
    kernel: (usize, usize, usize),
    trials: ArrayView3<'_, f64>,
    fs: f64,
    window: &FeatureWindow,
    n_perm: usize,
    seed: u64,
    normalize: bool,
) -> Result<PfiResult> {
    let (layer, in_ch, out_ch) = kernel;
    let (n, c, t) = trials.dim();
    check_perm(n_perm, n)?;
    let base = model.kernel_output(trials, layer, in_ch, out_ch)?;
    let m = base.mean().unwrap_or(0.0);
    let sd = (base.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (base.len().max(2) - 1) as f64).sqrt();
    let scale = if normalize { if sd > 0.0 { sd } else { 1.0 } } else { 1.0 };
    let (feats, axis1, axis2) = features(window, c, t, fs)?;
    let cache = build_cache(window.kind, trials, fs, window.stft_len)?;
    let perms: Vec<Vec<usize>> = (0..n_perm).map(|p| perm_for(n, seed, p)).collect();
    let raw = feats
        .par_iter()
        .map(|f| {
            perms
                .iter()
                .map(|perm| {
                    let x = shuffled(trials, f, perm, window.inverse, &cache)?;
                    let y = model.kernel_output(x.view(), layer, in_ch, out_ch)?;
                    Ok((&y - &base).mapv(f64::abs).mean().unwrap_or(0.0) / scale)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let delta = raw.iter().map(|r| r.iter().sum::<f64>() / n_perm as f64).collect();
    Ok(PfiResult { kind: window.kind, inverse: window.inverse, axis1, axis2, delta, raw, baseline: sd, n_perm })
}

/// Welch PSD of one kernel's output under N(0, 1) input. Fixed-length
/// models are fed enough trials to cover `n_samples`; `normalize` scales
/// the spectrum to unit total power.
#[allow(clippy::too_many_arguments)]
pub fn kernel_fir_analysis(
    model: &dyn KernelModel,
    kernel: (usize, usize, usize),
    n_samples: usize,
    fs: f64,
    seg_len: usize,
    seed: u64,
    normalize: bool,
) -> Result<PsdEstimate> {
    let (layer, in_ch, out_ch) = kernel;
    let c = model.input_channels();
    let (n, t) = match model.trial_len() {
        Some(t) => (n_samples.div_ceil(t).max(1), t),
        None => (1, n_samples),
    };
    let mut rng = rng_from(seed);
    let x = Array3::from_shape_fn((n, c, t), |_| StandardNormal.sample(&mut rng));
    let y = model.kernel_output(x.view(), layer, in_ch, out_ch)?;
    let len = y.ncols();
    let seg = seg_len.min(len);
    if seg < 2 {
        return Err(Error::shape(format!("kernel output of {len} samples is too short for a spectrum")));
    }
    let mut w = Welch::new(seg, Window::Hann, fs);
    for row in y.axis_iter(Axis(0)) {
        w.add_signal(&row.to_vec(), (seg / 2).max(1));
    }
    let mut p = w.mean_power();
    let freqs = w.freqs();
    if normalize {
        let total: f64 = p.iter().sum::<f64>() * (freqs.get(1).copied().unwrap_or(1.0));
        if total > 0.0 {
            p.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(PsdEstimate { freqs, power: vec![p], seg_len: seg, overlap: 0.5, window: Window::Hann, segments: w.segments() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::{ProjectedLda, Shrinkage, WavenetClassifierConfig};
    use crate::data::EpochedDataset;
    use crate::nnet::Activation;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Class signal on channel 0 at samples 10..20 (100 Hz, 0..400 ms).
    fn injected(n: usize, seed: u64) -> EpochedDataset {
        let (c, t) = (4, 40);
        let z = normals(n * c * t, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let trials = Array3::from_shape_fn((n, c, t), |(i, ch, tt)| {
            let s = if ch == 0 && (10..20).contains(&tt) { 1.2 * (2.0 * labels[i] as f64 - 1.0) } else { 0.0 };
            z[(i * c + ch) * t + tt] + s
        });
        EpochedDataset::new(trials, labels, 100.0, 2).unwrap()
    }

    #[test]
    fn temporal_pfi_finds_the_injection_and_ignores_dead_channel() {
        let train = injected(200, 1);
        let test = injected(200, 2);
        // Projection with a zero column for channel 3.
        let proj = Array2::from_shape_fn((3, 4), |(r, c)| if r == c { 1.0 } else { 0.0 });
        let model = ProjectedLda::fit(&train, proj, None, Shrinkage::Auto).unwrap();
        let before = test.trials().clone();
        let r = run_pfi(&model, test.trials().view(), test.labels(), 100.0, &FeatureWindow::temporal(10, 5), 5, 3).unwrap();
        assert_eq!(test.trials(), &before);
        let centre = r.axis1[r.argmax()];
        assert!((100.0..=200.0).contains(&centre), "{centre}");
        let s = run_pfi(&model, test.trials().view(), test.labels(), 100.0, &FeatureWindow::spatial(Vec::new()), 5, 3).unwrap();
        assert_eq!(s.delta[3], 0.0);
        assert!(s.raw[3].iter().all(|&v| v == 0.0));
        assert_eq!(s.argmax(), 0);
    }

    #[test]
    fn complement_identity_is_bit_exact() {
        let d = injected(30, 4);
        let x = d.trials().view();
        let full = FeatureWindow::temporal(40, 40);
        let a = shuffle_trials(x, 100.0, &full, 0, 9, 2).unwrap();
        let empty = Region::Time(0..0);
        let f = Feature { channels: Vec::new(), region: empty };
        let b = shuffled(x, &f, &perm_for(30, 9, 2), true, &Cache::None).unwrap();
        assert_eq!(a, b);
        let perm = perm_for(30, 9, 2);
        for i in 0..30 {
            assert_eq!(a.index_axis(Axis(0), i), x.index_axis(Axis(0), perm[i]));
        }
    }

    #[test]
    fn inverse_shuffles_only_outside() {
        let d = injected(20, 5);
        let x = d.trials().view();
        let w = FeatureWindow::temporal(10, 10).inverted();
        let y = shuffle_trials(x, 100.0, &w, 1, 3, 0).unwrap();
        for i in 0..20 {
            for tt in 0..40 {
                if (10..20).contains(&tt) {
                    assert_eq!(y[[i, 2, tt]], x[[i, 2, tt]]);
                }
            }
        }
        assert_ne!(y.slice(ndarray::s![.., .., 0..10]), x.slice(ndarray::s![.., .., 0..10]));
    }

    #[test]
    fn spectral_shuffle_moves_only_the_band() {
        let d = injected(10, 6);
        let x = d.trials().view();
        let w = FeatureWindow::spectral(10.0);
        // Band 1 covers 10..20 Hz on a 2.5 Hz grid.
        let y = shuffle_trials(x, 100.0, &w, 1, 5, 0).unwrap();
        let perm = perm_for(10, 5, 0);
        for i in 0..10 {
            for ch in 0..4 {
                let a = rfft(&y.slice(ndarray::s![i, ch, ..]).to_vec());
                let orig = rfft(&x.slice(ndarray::s![i, ch, ..]).to_vec());
                let donor = rfft(&x.slice(ndarray::s![perm[i], ch, ..]).to_vec());
                for k in 0..a.len() {
                    let f = k as f64 * 2.5;
                    let expect = if (10.0..20.0).contains(&f) { donor[k] } else { orig[k] };
                    assert!((a[k] - expect).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn spectral_pfi_finds_ten_hertz() {
        let (n, c, t) = (300, 3, 40);
        let z = normals(n * c * t, 7);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let phase = normals(n, 8);
        let trials = Array3::from_shape_fn((n, c, t), |(i, ch, tt)| {
            let amp = if labels[i] == 1 && ch == 1 { 1.5 } else { 0.0 };
            z[(i * c + ch) * t + tt] + amp * (2.0 * std::f64::consts::PI * 10.0 * tt as f64 / 100.0 + phase[i]).sin()
        });
        let test = EpochedDataset::new(trials, labels, 100.0, 2).unwrap();
        // The class lives in band power, so score with a power-threshold
        // oracle at the 10 Hz bin.
        struct Power;
        impl Classifier for Power {
            fn class_count(&self) -> usize {
                2
            }
            fn predict_proba(&self, x: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
                Ok(Array2::from_shape_fn((x.dim().0, 2), |(i, k)| {
                    let s = rfft(&x.slice(ndarray::s![i, 1, ..]).to_vec());
                    let hit = s[4].norm_sqr() > 200.0;
                    if (k == 1) == hit { 1.0 } else { 0.0 }
                }))
            }
        }
        let r = run_pfi(&Power, test.trials().view(), test.labels(), 100.0, &FeatureWindow::spectral(5.0), 4, 1).unwrap();
        let centre = r.axis1[r.argmax()];
        assert!((centre - 2.5..centre + 2.5).contains(&10.0), "{centre}");
        assert!(r.baseline > 0.8);
    }

    #[test]
    fn more_permutations_narrow_the_interval() {
        let d = injected(100, 10);
        let proj = Array2::eye(4);
        let model = ProjectedLda::fit(&injected(200, 11), proj, None, Shrinkage::Auto).unwrap();
        let w = FeatureWindow::temporal(10, 10);
        let a = run_pfi(&model, d.trials().view(), d.labels(), 100.0, &w, 10, 1).unwrap();
        let b = run_pfi(&model, d.trials().view(), d.labels(), 100.0, &w, 40, 1).unwrap();
        // Four times the permutations halve the interval, within 25%.
        let ratio = b.ci_width(1) / a.ci_width(1);
        assert!((ratio - 0.5).abs() <= 0.125, "{ratio}");
    }

    #[test]
    fn temporospectral_grid_and_full_shuffle() {
        let d = injected(12, 12);
        let mut w = FeatureWindow::new(PfiKind::Temporospectral);
        w.time_len = 10;
        w.time_stride = 10;
        w.band_hz = 20.0;
        let (feats, a1, a2) = features(&w, 4, 40, 100.0).unwrap();
        assert_eq!(a1.len(), 4);
        assert_eq!(a2.len(), 3);
        assert_eq!(feats.len(), 12);
        let y = shuffle_trials(d.trials().view(), 100.0, &w, 5, 1, 0).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        // Inverse of an empty block replaces every trial by its donor.
        let f = Feature { channels: Vec::new(), region: Region::Block(0..0, 0..0) };
        let cache = build_cache(PfiKind::Temporospectral, d.trials().view(), 100.0, 10).unwrap();
        let perm = perm_for(12, 2, 0);
        let all = shuffled(d.trials().view(), &f, &perm, true, &cache).unwrap();
        for i in 0..12 {
            assert_eq!(all.index_axis(Axis(0), i), d.trials().index_axis(Axis(0), perm[i]));
        }
    }

    #[test]
    fn kernel_pfi_passthrough_and_causality() {
        let cfg = WavenetClassifierConfig { layers: 2, hidden: Some(3), ..Default::default() };
        let mut m = WavenetClassifierModel::new(3, 20, 2, 0, &cfg).unwrap();
        let id = m.params.id("c0.w").unwrap();
        let w = m.params.value_mut(id);
        w.data.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..3 {
            w.data[(ch * 3 + ch) * 2 + 1] = 1.0;
        }
        let d = injected(30, 13);
        let x = d.trials().slice(ndarray::s![.., 0..3, 0..20]).to_owned();
        let spatial = FeatureWindow::spatial(Vec::new());
        let r = kernel_pfi(&m, (0, 1, 1), x.view(), 100.0, &spatial, 3, 4, false).unwrap();
        assert_eq!(r.delta[0], 0.0);
        assert_eq!(r.delta[2], 0.0);
        for (p, &v) in r.raw[1].iter().enumerate() {
            let perm = perm_for(30, 4, p);
            let mut s = 0.0;
            for i in 0..30 {
                for tt in 1..20 {
                    s += (x[[i, 1, tt]] - x[[perm[i], 1, tt]]).abs();
                }
            }
            assert!((v - s / (30.0 * 19.0)).abs() < 1e-12);
        }
        assert!(r.raw.iter().flatten().all(|&v| v >= 0.0));
        assert!(matches!(kernel_pfi(&m, (2, 0, 0), x.view(), 100.0, &spatial, 1, 0, false), Err(Error::Index(_))));
    }

    #[test]
    fn fir_analysis_identity_and_difference_kernel() {
        let mut m = SimpleWavenetModel::new(1, 2, 3, Activation::Identity, 100.0, 1);
        let id = m.params.id("l2.w").unwrap();
        let w = m.params.value_mut(id);
        w.data.iter_mut().for_each(|v| *v = 0.0);
        w.data[1] = 1.0;
        w.data[(2 + 1) * 2] = 1.0;
        w.data[(2 + 1) * 2 + 1] = -1.0;
        // Make the layer input white: one hidden unit copies the input.
        let iw = m.params.id("in.w").unwrap();
        m.params.value_mut(iw).data = vec![1.0, 1.0];
        for l in 0..2 {
            let lw = m.params.id(&format!("l{l}.w")).unwrap();
            let v = m.params.value_mut(lw);
            v.data.iter_mut().for_each(|x| *x = 0.0);
            v.data[1] = 1.0;
            v.data[(2 + 1) * 2 + 1] = 1.0;
        }
        let flat = kernel_fir_analysis(&m, (2, 0, 0), 200_000, 100.0, 64, 3, false).unwrap();
        let p = &flat.power[0][1..32];
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!(p.iter().all(|v| (10.0 * (v / mean).log10()).abs() < 3.0));
        let comb = kernel_fir_analysis(&m, (2, 1, 1), 200_000, 100.0, 64, 3, false).unwrap();
        // |1 - e^{-i 2 pi f d / fs}|^2 = 4 sin^2(pi f d / fs), d = 4.
        let white = 2.0 / 100.0;
        for (k, &f) in comb.freqs.iter().enumerate().skip(1).take(30) {
            let expect = white * 4.0 * (std::f64::consts::PI * f * 4.0 / 100.0).sin().powi(2);
            if expect > 0.2 * white {
                assert!((comb.power[0][k] / expect - 1.0).abs() < 0.25, "{f} Hz: {} vs {expect}", comb.power[0][k]);
            }
        }
        let null = comb.nearest_bin(25.0);
        assert!(comb.power[0][null] < 0.1 * white);
    }

    #[test]
    fn knn_groups_are_nearest() {
        let g = knn_groups(&[(0.0, 0.0), (1.0, 0.0), (5.0, 0.0), (6.0, 0.0)], 2);
        assert_eq!(g, vec![vec![0, 1], vec![0, 1], vec![2, 3], vec![2, 3]]);
    }
}
