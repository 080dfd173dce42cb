//! Spectral and evoked evaluation: Welch PSD, STFT/iSTFT, Morlet wavelets,
//! frequency-dominance state extraction, evoked averages and covariance.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::{EpochedDataset, MultichannelSeries};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    /// Periodic (DFT-even) window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n as f64;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

/// Forward real FFT returning the `n / 2 + 1` non-negative frequency bins.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf.truncate(n / 2 + 1);
    buf
}

/// Inverse of [`rfft`] for a signal of length `n`.
///
/// Negative frequencies are filled in by conjugate symmetry, and the
/// imaginary parts of the DC and Nyquist bins are ignored, so the output is
/// always real.
pub fn irfft(spec: &[Complex64], n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut buf = hermitian_full(spec, n);
    ifft.process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn hermitian_full(spec: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    buf[0] = Complex64::new(spec[0].re, 0.0);
    for k in 1..=half {
        let v = if k == half && n.is_multiple_of(2) { Complex64::new(spec[k].re, 0.0) } else { spec[k] };
        buf[k] = v;
        buf[n - k] = v.conj();
    }
    buf
}

/// One-sided power spectral density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    /// `C x F` power values.
    pub power: Vec<Vec<f64>>,
    pub seg_len: usize,
    pub overlap: f64,
    pub window: Window,
    pub segments: usize,
}

impl PsdEstimate {
    /// Frequency resolution of the grid.
    pub fn resolution(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1] - self.freqs[0]
        } else {
            f64::NAN
        }
    }

    /// Grid index nearest to `f`.
    pub fn nearest_bin(&self, f: f64) -> usize {
        let mut best = 0;
        for (i, &g) in self.freqs.iter().enumerate() {
            if (g - f).abs() < (self.freqs[best] - f).abs() {
                best = i;
            }
        }
        best
    }

    /// Rectangle-rule integral of channel `c` over the whole grid.
    pub fn total_power(&self, c: usize) -> f64 {
        self.power[c].iter().sum::<f64>() * self.resolution()
    }
}

/// Accumulates windowed periodograms of equal-length segments.
///
/// Each segment is mean-removed before windowing and its mean is credited to
/// the DC bin as `mean^2 / df`, so a constant offset moves power only into
/// the 0 Hz bin.
pub struct Welch {
    seg_len: usize,
    window: Window,
    coeffs: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    fs: f64,
    acc: Vec<f64>,
    segments: usize,
    buf: Vec<Complex64>,
}

impl Welch {
    pub fn new(seg_len: usize, window: Window, fs: f64) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(seg_len.max(1));
        Self {
            seg_len,
            window,
            coeffs: window.coefficients(seg_len),
            fft,
            fs,
            acc: vec![0.0; seg_len / 2 + 1],
            segments: 0,
            buf: vec![Complex64::new(0.0, 0.0); seg_len],
        }
    }

    pub fn add_segment(&mut self, seg: &[f64]) {
        debug_assert_eq!(seg.len(), self.seg_len);
        let n = self.seg_len;
        let mean = seg.iter().sum::<f64>() / n as f64;
        for (b, (&x, &w)) in self.buf.iter_mut().zip(seg.iter().zip(&self.coeffs)) {
            *b = Complex64::new((x - mean) * w, 0.0);
        }
        self.fft.process(&mut self.buf);
        let s2: f64 = self.coeffs.iter().map(|w| w * w).sum();
        let scale = 1.0 / (self.fs * s2);
        let df = self.fs / n as f64;
        for (k, a) in self.acc.iter_mut().enumerate() {
            let mut p = self.buf[k].norm_sqr() * scale;
            if k > 0 && !(n.is_multiple_of(2) && k == n / 2) {
                p *= 2.0;
            }
            if k == 0 {
                p += mean * mean / df;
            }
            *a += p;
        }
        self.segments += 1;
    }

    /// Adds every segment of `x` at the given hop.
    pub fn add_signal(&mut self, x: &[f64], hop: usize) {
        let mut start = 0;
        while start + self.seg_len <= x.len() {
            self.add_segment(&x[start..start + self.seg_len]);
            start += hop;
        }
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.acc.len()).map(|k| k as f64 * self.fs / self.seg_len as f64).collect()
    }

    /// Averaged spectrum; NaN everywhere if no segment was added.
    pub fn mean_power(&self) -> Vec<f64> {
        if self.segments == 0 {
            return vec![f64::NAN; self.acc.len()];
        }
        self.acc.iter().map(|a| a / self.segments as f64).collect()
    }

    pub fn window(&self) -> Window {
        self.window
    }
}

fn hop_for(seg_len: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    Ok(((seg_len as f64 * (1.0 - overlap)).round() as usize).max(1))
}

/// Welch PSD of a single channel.
pub fn welch_channel(x: &[f64], fs: f64, seg_len: usize, overlap: f64, window: Window) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if seg_len == 0 || seg_len > x.len() {
        return Err(Error::shape(format!(
            "Welch segment of {seg_len} samples does not fit a signal of {}",
            x.len()
        )));
    }
    let hop = hop_for(seg_len, overlap)?;
    let mut w = Welch::new(seg_len, window, fs);
    w.add_signal(x, hop);
    Ok((w.freqs(), w.mean_power(), w.segments()))
}

/// Welch PSD of every channel: averaged windowed periodograms, one-sided,
/// density scaled.
pub fn welch_psd(series: &MultichannelSeries, seg_len: usize, overlap: f64, window: Window) -> Result<PsdEstimate> {
    let mut power = Vec::with_capacity(series.channels());
    let mut freqs = Vec::new();
    let mut segments = 0;
    for c in 0..series.channels() {
        let (f, p, s) = welch_channel(&series.channel(c), series.fs(), seg_len, overlap, window)?;
        freqs = f;
        segments = s;
        power.push(p);
    }
    if series.channels() == 0 {
        hop_for(seg_len, overlap)?;
    }
    Ok(PsdEstimate { freqs, power, seg_len, overlap, window, segments })
}

/// Welch PSD with the default configuration: `2 * fs` samples per segment,
/// 50% overlap, Hann window.
pub fn welch_default(series: &MultichannelSeries) -> Result<PsdEstimate> {
    let seg = (2.0 * series.fs()).round() as usize;
    welch_psd(series, seg, 0.5, Window::Hann)
}

/// Grid indices that are strict local maxima of `p`.
pub fn local_maxima(p: &[f64]) -> Vec<usize> {
    (1..p.len().saturating_sub(1))
        .filter(|&i| p[i] > p[i - 1] && p[i] > p[i + 1])
        .collect()
}

/// Whether `p` has a local maximum within `tol` Hz of `f`.
pub fn has_peak_near(freqs: &[f64], p: &[f64], f: f64, tol: f64) -> bool {
    local_maxima(p).into_iter().any(|i| (freqs[i] - f).abs() <= tol)
}

/// Short-time Fourier transform with one-sided frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Stft {
    /// `C x frames x bins`.
    pub data: Array3<Complex64>,
    pub win_len: usize,
    pub hop: usize,
    pub window: Window,
    /// Signal length before padding.
    pub len: usize,
    pub fs: f64,
}

impl Stft {
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.bins()).map(|k| k as f64 * self.fs / self.win_len as f64).collect()
    }

    /// Start sample of frame `m`.
    pub fn frame_start(&self, m: usize) -> usize {
        m * self.hop
    }
}

fn stft_frames(len: usize, win_len: usize, hop: usize) -> usize {
    if len <= win_len {
        1
    } else {
        (len - win_len).div_ceil(hop) + 1
    }
}

/// Checks the overlap-add admissibility of a window/hop pair for a signal of
/// `len` samples.
pub fn stft_admissible(len: usize, win_len: usize, hop: usize, window: Window) -> Result<()> {
    if win_len == 0 || hop == 0 || hop > win_len {
        return Err(Error::Config(format!(
            "STFT needs 1 <= hop <= window, got window {win_len}, hop {hop}"
        )));
    }
    let w = window.coefficients(win_len);
    let frames = stft_frames(len, win_len, hop);
    let mut denom = vec![0.0; (frames - 1) * hop + win_len];
    for m in 0..frames {
        for (k, wk) in w.iter().enumerate() {
            denom[m * hop + k] += wk * wk;
        }
    }
    if let Some(i) = denom[..len].iter().position(|&d| d < 1e-10) {
        return Err(Error::Config(format!(
            "window {win_len} / hop {hop} leaves sample {i} without overlap-add support"
        )));
    }
    Ok(())
}

/// STFT of every channel. Frames start every `hop` samples; the end is
/// zero-padded so the last sample is covered.
pub fn stft(series: &MultichannelSeries, win_len: usize, hop: usize, window: Window) -> Result<Stft> {
    stft_array(series.view(), series.fs(), win_len, hop, window)
}

pub fn stft_array(x: ArrayView2<'_, f64>, fs: f64, win_len: usize, hop: usize, window: Window) -> Result<Stft> {
    let (channels, len) = x.dim();
    stft_admissible(len, win_len, hop, window)?;
    let w = window.coefficients(win_len);
    let frames = stft_frames(len, win_len, hop);
    let bins = win_len / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(win_len);
    let mut data = Array3::from_elem((channels, frames, bins), Complex64::new(0.0, 0.0));
    let mut buf = vec![Complex64::new(0.0, 0.0); win_len];
    for c in 0..channels {
        let row = x.row(c);
        for m in 0..frames {
            let start = m * hop;
            for k in 0..win_len {
                let v = if start + k < len { row[start + k] } else { 0.0 };
                buf[k] = Complex64::new(v * w[k], 0.0);
            }
            fft.process(&mut buf);
            for b in 0..bins {
                data[[c, m, b]] = buf[b];
            }
        }
    }
    Ok(Stft { data, win_len, hop, window, len, fs })
}

/// Weighted overlap-add inverse: `x[n] = sum_m w y_m / sum_m w^2`.
pub fn istft(z: &Stft) -> Result<MultichannelSeries> {
    let data = istft_array(z)?;
    MultichannelSeries::new(data, z.fs)
}

pub fn istft_array(z: &Stft) -> Result<Array2<f64>> {
    stft_admissible(z.len, z.win_len, z.hop, z.window)?;
    let (channels, frames, _) = z.data.dim();
    let n = z.win_len;
    let w = z.window.coefficients(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let total = (frames - 1) * z.hop + n;
    let mut denom = vec![0.0; total];
    for m in 0..frames {
        for k in 0..n {
            denom[m * z.hop + k] += w[k] * w[k];
        }
    }
    let mut out = Array2::zeros((channels, z.len));
    let mut acc = vec![0.0; total];
    for c in 0..channels {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for m in 0..frames {
            let spec: Vec<Complex64> = (0..z.bins()).map(|b| z.data[[c, m, b]]).collect();
            let mut buf = hermitian_full(&spec, n);
            ifft.process(&mut buf);
            let start = m * z.hop;
            for k in 0..n {
                acc[start + k] += w[k] * buf[k].re / n as f64;
            }
        }
        for t in 0..z.len {
            out[[c, t]] = acc[t] / denom[t];
        }
    }
    Ok(out)
}

/// Morlet wavelet power, `C x F x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPower {
    pub power: Array3<f64>,
    pub freqs: Vec<f64>,
    pub fs: f64,
    pub cycles: f64,
    /// Per-frequency half-width of the wavelet support in samples; that
    /// many samples at either end are edge-affected.
    pub edge: Vec<usize>,
}

impl WaveletPower {
    /// Sample range unaffected by edges at every frequency.
    pub fn valid_range(&self) -> std::ops::Range<usize> {
        let t = self.power.shape()[2];
        let e = self.edge.iter().copied().max().unwrap_or(0);
        if 2 * e >= t {
            0..0
        } else {
            e..t - e
        }
    }
}

/// Number of Gaussian standard deviations kept on either side of a Morlet
/// wavelet. Five keeps the truncation ripple below 1e-5 in amplitude.
const MORLET_SUPPORT_SD: f64 = 5.0;

/// Complex Morlet taps for frequency `f`, scaled so a unit-amplitude
/// sinusoid at `f` has unit power.
pub fn morlet_kernel(f: f64, fs: f64, cycles: f64) -> Vec<Complex64> {
    let sd = cycles / (2.0 * PI * f);
    let half = (MORLET_SUPPORT_SD * sd * fs).ceil() as i64;
    let gauss: Vec<f64> = (-half..=half)
        .map(|k| {
            let t = k as f64 / fs;
            (-t * t / (2.0 * sd * sd)).exp()
        })
        .collect();
    let norm = 2.0 / gauss.iter().sum::<f64>();
    (-half..=half)
        .zip(gauss)
        .map(|(k, g)| {
            let t = k as f64 / fs;
            Complex64::from_polar(norm * g, 2.0 * PI * f * t)
        })
        .collect()
}

/// Complex Morlet transform power per channel and frequency.
pub fn morlet_transform(series: &MultichannelSeries, freqs: &[f64], cycles: f64) -> Result<WaveletPower> {
    let fs = series.fs();
    for &f in freqs {
        if !(f > 0.0 && f < fs / 2.0) {
            return Err(Error::Frequency(format!("wavelet frequency {f} Hz outside (0, {})", fs / 2.0)));
        }
    }
    let t = series.timesteps();
    let kernels: Vec<Vec<Complex64>> = freqs.iter().map(|&f| morlet_kernel(f, fs, cycles)).collect();
    let edge: Vec<usize> = kernels.iter().map(|k| k.len() / 2).collect();
    let mut power = Array3::zeros((series.channels(), freqs.len(), t));
    if t == 0 {
        return Ok(WaveletPower { power, freqs: freqs.to_vec(), fs, cycles, edge });
    }
    let max_len = kernels.iter().map(Vec::len).max().unwrap_or(1);
    let n = (t + max_len).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let kernel_spectra: Vec<Vec<Complex64>> = kernels
        .iter()
        .map(|k| {
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            buf[..k.len()].copy_from_slice(k);
            fwd.process(&mut buf);
            buf
        })
        .collect();
    for c in 0..series.channels() {
        let mut xs = vec![Complex64::new(0.0, 0.0); n];
        for (j, &v) in series.data().row(c).iter().enumerate() {
            xs[j] = Complex64::new(v, 0.0);
        }
        fwd.process(&mut xs);
        for (fi, ks) in kernel_spectra.iter().enumerate() {
            let mut buf: Vec<Complex64> = xs.iter().zip(ks).map(|(a, b)| a * b).collect();
            inv.process(&mut buf);
            let shift = edge[fi];
            for j in 0..t {
                power[[c, fi, j]] = (buf[j + shift] / n as f64).norm_sqr();
            }
        }
    }
    Ok(WaveletPower { power, freqs: freqs.to_vec(), fs, cycles, edge })
}

/// Per-timepoint argmax over the rows of `power` (one channel, `F x T`),
/// lowest index winning ties.
pub fn naive_state_extraction(power: ArrayView2<'_, f64>) -> Vec<usize> {
    let (f, t) = power.dim();
    (0..t)
        .map(|j| {
            let mut best = 0;
            for i in 1..f {
                if power[[i, j]] > power[[best, j]] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of timepoints in `range` where the strongest row exceeds every
/// other row by more than `ratio`.
pub fn dominance_fraction(power: ArrayView2<'_, f64>, range: std::ops::Range<usize>, ratio: f64) -> f64 {
    let f = power.nrows();
    if range.is_empty() || f == 0 {
        return f64::NAN;
    }
    let n = range.len();
    let hits = range
        .filter(|&j| {
            let col = power.column(j);
            let best = naive_state_extraction(col.insert_axis(Axis(1)))[0];
            (0..f).all(|i| i == best || col[best] > ratio * col[i])
        })
        .count();
    hits as f64 / n as f64
}

/// Trial mean and across-trial variance (`N - 1`), each `C x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evoked {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
    pub n_trials: usize,
}

fn evoked_of(trials: &Array3<f64>) -> Evoked {
    let n = trials.shape()[0];
    let mean = trials.mean_axis(Axis(0)).expect("at least one trial");
    let var = if n > 1 {
        trials.var_axis(Axis(0), 1.0)
    } else {
        Array2::from_elem(mean.dim(), f64::NAN)
    };
    Evoked { mean, var, n_trials: n }
}

/// Evoked average over all trials, or one per condition (empty conditions
/// are `None`).
pub fn evoked_average(dataset: &EpochedDataset, per_condition: bool) -> Result<Vec<Option<Evoked>>> {
    if dataset.n_trials() == 0 {
        return Err(Error::shape("evoked average needs at least one trial"));
    }
    if !per_condition {
        return Ok(vec![Some(evoked_of(dataset.trials()))]);
    }
    Ok((0..dataset.class_count())
        .map(|c| {
            let idx: Vec<usize> = (0..dataset.n_trials()).filter(|&n| dataset.labels()[n] == c).collect();
            (!idx.is_empty()).then(|| evoked_of(&dataset.trials().select(Axis(0), &idx)))
        })
        .collect())
}

/// Pearson correlation; NaN when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        f64::NAN
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Per-channel correlation of evoked means and of evoked variances.
#[derive(Debug, Clone, PartialEq)]
pub struct EvokedCorrelation {
    pub mean_corr: Vec<f64>,
    pub var_corr: Vec<f64>,
    /// Set when any correlation was undefined.
    pub degenerate: bool,
}

pub fn evoked_correlation(real: &EpochedDataset, generated: &EpochedDataset) -> Result<EvokedCorrelation> {
    if real.channels() != generated.channels() || real.timesteps() != generated.timesteps() {
        return Err(Error::shape(format!(
            "epochs differ: {}x{} vs {}x{}",
            real.channels(),
            real.timesteps(),
            generated.channels(),
            generated.timesteps()
        )));
    }
    let a = evoked_average(real, false)?.remove(0).unwrap();
    let b = evoked_average(generated, false)?.remove(0).unwrap();
    let mut mean_corr = Vec::new();
    let mut var_corr = Vec::new();
    for c in 0..real.channels() {
        mean_corr.push(pearson(&a.mean.row(c).to_vec(), &b.mean.row(c).to_vec()));
        var_corr.push(pearson(&a.var.row(c).to_vec(), &b.var.row(c).to_vec()));
    }
    let degenerate = mean_corr.iter().chain(&var_corr).any(|v| v.is_nan());
    Ok(EvokedCorrelation { mean_corr, var_corr, degenerate })
}

/// Sample covariance (`N - 1`) between channels of a `C x T` matrix.
pub fn covariance_matrix(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (c, t) = x.dim();
    if t < 2 {
        return Err(Error::shape(format!("covariance needs T >= 2, got {t}")));
    }
    let mean = x.mean_axis(Axis(1)).unwrap();
    let centered = &x - &mean.insert_axis(Axis(1));
    let mut cov = centered.dot(&centered.t()) / (t - 1) as f64;
    for i in 0..c {
        for j in 0..i {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(cov)
}

pub fn covariance(series: &MultichannelSeries) -> Result<Array2<f64>> {
    covariance_matrix(series.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use ndarray::Array;
    use rand_distr::{Distribution, StandardNormal};

    fn sine(f: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    fn noise(n: usize, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); sd * z }).collect()
    }

    fn series(x: Vec<f64>, fs: f64) -> MultichannelSeries {
        MultichannelSeries::from_channel(&x, fs).unwrap()
    }

    #[test]
    fn welch_sine_peak() {
        let s = series(sine(10.0, 250.0, 5000, 1.0), 250.0);
        let p = welch_default(&s).unwrap();
        let argmax = (0..p.freqs.len()).max_by(|&a, &b| p.power[0][a].total_cmp(&p.power[0][b])).unwrap();
        assert_eq!(argmax, p.nearest_bin(10.0));
        // Integrated power of a unit sinusoid is 1/2.
        assert!((p.total_power(0) - 0.5).abs() < 0.01);
    }

    #[test]
    fn welch_white_noise_parseval() {
        let s = series(noise(100_000, 1.5, 1), 250.0);
        let p = welch_default(&s).unwrap();
        assert!((p.total_power(0) / 2.25 - 1.0).abs() < 0.1);
    }

    #[test]
    fn welch_dc_only() {
        let s = series(vec![3.0; 1000], 100.0);
        let p = welch_psd(&s, 200, 0.5, Window::Hann).unwrap();
        assert!(p.power[0][0] > 0.0);
        assert!(p.power[0][1..].iter().all(|&v| v == 0.0));
        assert!((p.total_power(0) - 9.0).abs() < 1e-9);
    }

    #[test]
    fn welch_constant_offset_only_moves_dc() {
        let x = noise(4000, 1.0, 5);
        let y: Vec<f64> = x.iter().map(|v| v + 7.0).collect();
        let a = welch_psd(&series(x, 100.0), 200, 0.5, Window::Hann).unwrap();
        let b = welch_psd(&series(y, 100.0), 200, 0.5, Window::Hann).unwrap();
        for k in 1..a.freqs.len() {
            assert!((a.power[0][k] - b.power[0][k]).abs() <= 1e-9 * a.power[0][k].max(1e-12));
        }
        assert!(b.power[0][0] > a.power[0][0]);
    }

    #[test]
    fn welch_segment_too_long() {
        let s = series(vec![0.0; 10], 1.0);
        assert!(matches!(welch_psd(&s, 11, 0.5, Window::Hann), Err(Error::Shape(_))));
    }

    #[test]
    fn stft_roundtrip_matrix() {
        let x = Array::from_shape_vec((2, 203), noise(406, 1.0, 9)).unwrap();
        let s = MultichannelSeries::new(x, 100.0).unwrap();
        for w in [8, 10, 16] {
            for h in [1, 2] {
                let z = stft(&s, w, h, Window::Hamming).unwrap();
                let back = istft(&z).unwrap();
                let err = back.data().iter().zip(s.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-8, "w={w} h={h} err={err}");
            }
        }
    }

    #[test]
    fn stft_zero_and_inadmissible() {
        let s = series(vec![0.0; 50], 100.0);
        let z = stft(&s, 10, 1, Window::Hamming).unwrap();
        assert!(z.data.iter().all(|c| c.norm() == 0.0));
        assert!(matches!(stft(&s, 10, 11, Window::Hamming), Err(Error::Config(_))));
        assert!(matches!(stft(&s, 10, 10, Window::Hann), Err(Error::Config(_))));
    }

    #[test]
    fn stft_single_tone_concentrates() {
        let fs = 250.0;
        let s = series(sine(50.0, fs, 1000, 1.0), fs);
        let z = stft(&s, 25, 1, Window::Hamming).unwrap();
        let mut per_bin = vec![0.0; z.bins()];
        for m in 0..z.frames() {
            for b in 0..z.bins() {
                per_bin[b] += z.data[[0, m, b]].norm_sqr();
            }
        }
        let total: f64 = per_bin.iter().sum();
        let peak = (0..per_bin.len()).max_by(|&a, &b| per_bin[a].total_cmp(&per_bin[b])).unwrap();
        assert_eq!(peak, 5);
        // A bin-centred tone under a Hamming window leaves 0.23^2 / 0.54^2 of
        // the peak energy in each neighbouring bin, so the peak row alone
        // holds about 73% and the main lobe essentially all of it.
        let lobe = per_bin[4] + per_bin[5] + per_bin[6];
        assert!(per_bin[5] / total > 0.7, "{}", per_bin[5] / total);
        assert!(lobe / total >= 0.99, "{}", lobe / total);
    }

    #[test]
    fn rfft_inverse() {
        for n in [1, 2, 7, 16] {
            let x = noise(n, 1.0, n as u64);
            let back = irfft(&rfft(&x), n);
            for (a, b) in back.iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn morlet_unit_sine_power() {
        let fs = 250.0;
        for f in [8.0, 20.0, 45.0] {
            let s = series(sine(f, fs, 5000, 1.0), fs);
            let w = morlet_transform(&s, &[f], 7.0).unwrap();
            let r = w.valid_range();
            let mean: f64 = r.clone().map(|j| w.power[[0, 0, j]]).sum::<f64>() / r.len() as f64;
            assert!((mean - 1.0).abs() < 1e-3, "f={f} power={mean}");
        }
    }

    #[test]
    fn morlet_constant_has_no_power() {
        let s = series(vec![2.0; 3000], 250.0);
        let w = morlet_transform(&s, &[5.0, 10.0, 40.0], 7.0).unwrap();
        for fi in 0..3 {
            for j in w.valid_range() {
                assert!(w.power[[0, fi, j]] < 1e-6 * 4.0);
            }
        }
    }

    #[test]
    fn morlet_chirp_tracks_frequency() {
        let fs = 250.0;
        let n = 5000;
        let dur = n as f64 / fs;
        // Instantaneous frequency 10 -> 30 Hz.
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * (10.0 * t + 10.0 * t * t / dur)).sin()
            })
            .collect();
        let freqs: Vec<f64> = (10..=30).map(|f| f as f64).collect();
        let w = morlet_transform(&series(x, fs), &freqs, 7.0).unwrap();
        let states = naive_state_extraction(w.power.index_axis(Axis(0), 0));
        let r = w.valid_range();
        let trimmed = &states[r];
        assert!(trimmed.windows(2).all(|p| p[1] >= p[0]));
        assert!(trimmed.last().unwrap() > trimmed.first().unwrap());
    }

    #[test]
    fn morlet_time_reversal_symmetry() {
        let fs = 100.0;
        let half: Vec<f64> = noise(400, 1.0, 3);
        let mut x = half.clone();
        x.extend(half.iter().rev());
        let rev: Vec<f64> = x.iter().rev().cloned().collect();
        let a = morlet_transform(&series(x, fs), &[10.0], 7.0).unwrap();
        let b = morlet_transform(&series(rev, fs), &[10.0], 7.0).unwrap();
        let t = 800;
        for j in a.valid_range() {
            let (p, q) = (a.power[[0, 0, j]], b.power[[0, 0, t - 1 - j]]);
            assert!((p - q).abs() <= 1e-6 * p.max(1e-9), "{p} {q}");
        }
    }

    #[test]
    fn morlet_bad_frequency() {
        let s = series(vec![0.0; 100], 100.0);
        assert!(matches!(morlet_transform(&s, &[50.0], 7.0), Err(Error::Frequency(_))));
    }

    #[test]
    fn naive_extraction_ties_and_tone() {
        let flat = Array2::from_elem((3, 5), 1.0);
        assert_eq!(naive_state_extraction(flat.view()), vec![0; 5]);
        let fs = 250.0;
        let s = series(sine(20.0, fs, 3000, 1.0), fs);
        let w = morlet_transform(&s, &[10.0, 15.0, 20.0, 30.0], 7.0).unwrap();
        let st = naive_state_extraction(w.power.index_axis(Axis(0), 0));
        assert!(st[w.valid_range()].iter().all(|&k| k == 2));
    }

    #[test]
    fn evoked_variance_properties() {
        let trials = Array3::from_shape_fn((4, 2, 3), |(_, c, t)| (c * 3 + t) as f64);
        let ds = EpochedDataset::from_labels(trials, vec![0, 0, 1, 1], 1.0).unwrap();
        let ev = evoked_average(&ds, false).unwrap().remove(0).unwrap();
        assert!(ev.var.iter().all(|&v| v == 0.0));
        let per = evoked_average(&ds, true).unwrap();
        assert_eq!(per.len(), 2);

        let one = ds.subset(&[0]);
        let ev1 = evoked_average(&one, false).unwrap().remove(0).unwrap();
        assert_eq!(ev1.mean, one.trial(0).to_owned());
        assert!(ev1.var.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn evoked_template_plus_noise_variance() {
        let n = 100;
        let sd = 0.5;
        let e = noise(n * 200, sd, 77);
        let trials = Array3::from_shape_fn((n, 1, 200), |(i, _, t)| (t as f64 * 0.1).sin() + e[i * 200 + t]);
        let ds = EpochedDataset::from_labels(trials, vec![0; n], 100.0).unwrap();
        let ev = evoked_average(&ds, false).unwrap().remove(0).unwrap();
        let mean_var = ev.var.mean().unwrap();
        assert!((mean_var / (sd * sd) - 1.0).abs() < 0.15);
    }

    #[test]
    fn evoked_correlation_signs() {
        let e = noise(30 * 50, 1.0, 4);
        let trials = Array3::from_shape_fn((30, 1, 50), |(i, _, t)| (t as f64 * 0.3).sin() + e[i * 50 + t]);
        let real = EpochedDataset::from_labels(trials.clone(), vec![0; 30], 100.0).unwrap();
        let same = evoked_correlation(&real, &real).unwrap();
        assert!((same.mean_corr[0] - 1.0).abs() < 1e-12 && (same.var_corr[0] - 1.0).abs() < 1e-12);
        let neg = real.with_trials(-trials).unwrap();
        let c = evoked_correlation(&real, &neg).unwrap();
        assert!((c.mean_corr[0] + 1.0).abs() < 1e-12 && (c.var_corr[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_duplicate_and_independent() {
        let a = noise(10_000, 1.0, 1);
        let b = noise(10_000, 1.0, 2);
        let mut rows = a.clone();
        rows.extend(&a);
        rows.extend(&b);
        let x = Array::from_shape_vec((3, 10_000), rows).unwrap();
        let cov = covariance_matrix(x.view()).unwrap();
        let r01 = cov[[0, 1]] / (cov[[0, 0]] * cov[[1, 1]]).sqrt();
        assert!((r01 - 1.0).abs() < 1e-12);
        assert!(cov[[0, 2]].abs() < 3.0 / 100.0);
        assert_eq!(cov[[0, 2]], cov[[2, 0]]);
    }
}
