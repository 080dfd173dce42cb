//! Signal containers, epoching, normalisation and stratified splitting.
//!
//! All containers are channel-major: a series is `C x T`, a dataset is
//! `N x C x T`. Sample statistics use the `N - 1` denominator.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, rng_from};

/// A `C x T` real-valued timeseries with its sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSeries {
    data: Array2<f64>,
    fs: f64,
}

impl MultichannelSeries {
    pub fn new(data: Array2<f64>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::Domain(format!("sampling rate must be positive, got {fs}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite sample at flat index {pos}"
            )));
        }
        Ok(Self { data, fs })
    }

    /// Single-channel series from a slice.
    pub fn from_channel(values: &[f64], fs: f64) -> Result<Self> {
        let data = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .expect("1 x T shape always matches");
        Self::new(data, fs)
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn timesteps(&self) -> usize {
        self.data.ncols()
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Channel `c` as a contiguous vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.row(c).to_vec()
    }

    /// Columns `start..end` as a new series.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.timesteps() {
            return Err(Error::Range(format!(
                "time slice {start}..{end} outside 0..{}",
                self.timesteps()
            )));
        }
        Ok(Self {
            data: self.data.slice(s![.., start..end]).to_owned(),
            fs: self.fs,
        })
    }
}

/// `N` trials of `C x T` samples with integer condition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochedDataset {
    trials: Array3<f64>,
    labels: Vec<usize>,
    fs: f64,
    class_count: usize,
}

impl EpochedDataset {
    pub fn new(trials: Array3<f64>, labels: Vec<usize>, fs: f64, class_count: usize) -> Result<Self> {
        if trials.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} trials but {} labels",
                trials.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Range(format!(
                "label {bad} is not below class count {class_count}"
            )));
        }
        if !(fs > 0.0) {
            return Err(Error::Domain(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(Self { trials, labels, fs, class_count })
    }

    /// Class count inferred as `max(label) + 1`.
    pub fn from_labels(trials: Array3<f64>, labels: Vec<usize>, fs: f64) -> Result<Self> {
        let class_count = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(trials, labels, fs, class_count)
    }

    pub fn n_trials(&self) -> usize {
        self.trials.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.trials.shape()[1]
    }

    pub fn timesteps(&self) -> usize {
        self.trials.shape()[2]
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn trials(&self) -> &Array3<f64> {
        &self.trials
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn trial(&self, n: usize) -> ArrayView2<'_, f64> {
        self.trials.index_axis(Axis(0), n)
    }

    /// Same labels and metadata with replaced trial data of identical `N`.
    pub fn with_trials(&self, trials: Array3<f64>) -> Result<Self> {
        Self::new(trials, self.labels.clone(), self.fs, self.class_count)
    }

    /// Trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let trials = self.trials.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { trials, labels, fs: self.fs, class_count: self.class_count }
    }

    /// Samples `start..end` of every trial.
    pub fn crop_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.timesteps() {
            return Err(Error::shape(format!(
                "window {start}..{end} does not fit a trial of {} samples",
                self.timesteps()
            )));
        }
        let trials = self.trials.slice(s![.., .., start..end]).to_owned();
        Ok(Self { trials, labels: self.labels.clone(), fs: self.fs, class_count: self.class_count })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-channel normalisation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Max-abs scale applied after standardisation (and clipping), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
}

impl NormParams {
    /// Maps raw values to `(x - mean) / std`.
    pub fn apply(&self, series: &MultichannelSeries) -> Result<MultichannelSeries> {
        self.check_channels(series.channels())?;
        let mut data = series.data().clone();
        for (c, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
            let (m, sd) = (self.mean[c], self.std[c]);
            row.mapv_inplace(|v| (v - m) / sd);
        }
        MultichannelSeries::new(data, series.fs())
    }

    /// Inverse of [`NormParams::apply`].
    pub fn invert(&self, series: &MultichannelSeries) -> Result<MultichannelSeries> {
        self.check_channels(series.channels())?;
        let mut data = series.data().clone();
        for (c, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
            let (m, sd) = (self.mean[c], self.std[c]);
            row.mapv_inplace(|v| v * sd + m);
        }
        MultichannelSeries::new(data, series.fs())
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::shape(format!(
                "normalisation has {} channels, series has {channels}",
                self.mean.len()
            )));
        }
        Ok(())
    }
}

/// Cuts windows `[onset + start, onset + end)` out of `series`.
pub fn epoch(
    series: &MultichannelSeries,
    onsets: &[usize],
    window: (i64, i64),
    labels: &[usize],
) -> Result<EpochedDataset> {
    if onsets.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} onsets but {} labels",
            onsets.len(),
            labels.len()
        )));
    }
    let (start, end) = window;
    if end <= start {
        return Err(Error::shape(format!("empty epoch window [{start}, {end})")));
    }
    let len = (end - start) as usize;
    let t_total = series.timesteps() as i64;
    let mut trials = Array3::zeros((onsets.len(), series.channels(), len));
    for (n, &onset) in onsets.iter().enumerate() {
        let a = onset as i64 + start;
        let b = onset as i64 + end;
        if a < 0 || b > t_total {
            return Err(Error::Range(format!(
                "onset index {n} (sample {onset}) spans [{a}, {b}) outside [0, {t_total})"
            )));
        }
        trials
            .index_axis_mut(Axis(0), n)
            .assign(&series.data().slice(s![.., a as usize..b as usize]));
    }
    EpochedDataset::from_labels(trials, labels.to_vec(), series.fs())
}

/// Per-channel mean and `N - 1` standard deviation.
pub fn channel_stats(data: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    let t = data.ncols();
    let mut means = Vec::with_capacity(data.nrows());
    let mut stds = Vec::with_capacity(data.nrows());
    for row in data.axis_iter(Axis(0)) {
        let m = row.sum() / t as f64;
        let ss: f64 = row.iter().map(|v| (v - m) * (v - m)).sum();
        means.push(m);
        stds.push(if t > 1 { (ss / (t - 1) as f64).sqrt() } else { 0.0 });
    }
    (means, stds)
}

/// Standardises every channel to zero mean and unit sample variance.
pub fn standardize(series: &MultichannelSeries) -> Result<(MultichannelSeries, NormParams)> {
    let (mean, std) = channel_stats(series.view());
    if let Some(channel) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateChannel { channel });
    }
    let params = NormParams { mean, std, scale: None };
    Ok((params.apply(series)?, params))
}

/// Splits each class in the ratio `train : validation`.
///
/// The validation side receives `floor(n * v / (t + v))` trials per class and
/// the remainder goes to training. Both outputs keep the original trial order.
pub fn split_stratified(
    dataset: &EpochedDataset,
    ratio: (u32, u32),
    seed: u64,
) -> Result<(EpochedDataset, EpochedDataset)> {
    let (rt, rv) = ratio;
    if rt + rv == 0 {
        return Err(Error::Stratify("ratio must have a positive total".into()));
    }
    let mut rng = rng_from(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..dataset.class_count() {
        let members: Vec<usize> = dataset
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        match members.len() {
            0 => continue,
            1 => {
                return Err(Error::Stratify(format!(
                    "class {class} has a single trial and cannot be split"
                )))
            }
            _ => {}
        }
        let n = members.len();
        let n_val = n * rv as usize / (rt + rv) as usize;
        let order = permutation(n, &mut rng);
        for (rank, &k) in order.iter().enumerate() {
            if rank < n_val {
                val.push(members[k]);
            } else {
                train.push(members[k]);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}
