//! Trial classifiers: shrinkage LDA, the linear network whose first layer
//! supplies a supervised spatial projection, projected-LDA pipelines over
//! full epochs or sliding windows, pairwise accuracies, the Haufe
//! transform, and a dilated-convolution classifier with subject
//! embeddings.

use nalgebra::{Cholesky, DMatrix};
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EpochedDataset;
use crate::error::{Error, Result};
use crate::linmodels::fit_pca;
use crate::nnet::{Graph, OptimKind, OptimState, ParamStore, Tensor, Var};
use crate::rng::{derive_seed, permutation, rng_from};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Anything that maps `N x C x T` trials to class probabilities.
pub trait Classifier: Sync {
    fn class_count(&self) -> usize;

    fn predict_proba(&self, trials: ArrayView3<'_, f64>) -> Result<Array2<f64>>;

    fn predict(&self, trials: ArrayView3<'_, f64>) -> Result<Vec<usize>> {
        let p = self.predict_proba(trials)?;
        Ok(p.axis_iter(Axis(0)).map(argmax).collect())
    }

    fn accuracy(&self, trials: ArrayView3<'_, f64>, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.predict(trials)?, labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "gamma")]
pub enum Shrinkage {
    Fixed(f64),
    /// Ledoit-Wolf estimate from the class-centred samples.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    /// `K x F` class means.
    pub means: Array2<f64>,
    /// Shrunk pooled within-class covariance.
    pub covariance: Array2<f64>,
    pub precision: Array2<f64>,
    pub log_priors: Vec<f64>,
    pub gamma: f64,
    /// `K x F` discriminant weights `precision * mean_k`.
    pub coef: Array2<f64>,
    pub intercept: Vec<f64>,
}

/// Ledoit-Wolf shrinkage intensity toward `(tr S / F) I` for rows of
/// already-centred samples.
pub fn ledoit_wolf_gamma(centered: ArrayView2<'_, f64>) -> f64 {
    let (n, f) = centered.dim();
    let nf = n as f64;
    let s = centered.t().dot(&centered) / nf;
    let mu = s.diag().sum() / f as f64;
    let s_norm2: f64 = s.iter().map(|v| v * v).sum();
    let d2 = s_norm2 - 2.0 * mu * s.diag().sum() + f as f64 * mu * mu;
    // sum_n ||x_n x_n' - S||^2 = sum_n ||x_n||^4 - N ||S||^2
    let fourth: f64 = centered.axis_iter(Axis(0)).map(|r| r.dot(&r).powi(2)).sum();
    let b2 = ((fourth / nf - s_norm2) / nf).max(0.0);
    if d2 <= 0.0 {
        return 0.0;
    }
    b2.min(d2) / d2
}

pub fn fit_lda(features: ArrayView2<'_, f64>, labels: &[usize], class_count: usize, shrinkage: Shrinkage) -> Result<LdaModel> {
    let (n, f) = features.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} feature rows but {} labels", labels.len())));
    }
    if f == 0 {
        return Err(Error::shape("LDA needs at least one feature"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::Index(format!("label {bad} outside {class_count} classes")));
    }
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ClassCount { class });
    }
    if n <= class_count {
        return Err(Error::shape(format!("{n} samples for {class_count} classes")));
    }
    let mut means = Array2::zeros((class_count, f));
    for (row, &l) in features.axis_iter(Axis(0)).zip(labels) {
        let mut m = means.row_mut(l);
        m += &row;
    }
    for (k, mut m) in means.axis_iter_mut(Axis(0)).enumerate() {
        m /= counts[k] as f64;
    }
    let mut centered = features.to_owned();
    for (mut row, &l) in centered.axis_iter_mut(Axis(0)).zip(labels) {
        row -= &means.row(l);
    }
    let pooled = centered.t().dot(&centered) / (n - class_count) as f64;
    let gamma = match shrinkage {
        Shrinkage::Fixed(g) if (0.0..=1.0).contains(&g) => g,
        Shrinkage::Fixed(g) => return Err(Error::Config(format!("shrinkage {g} outside [0, 1]"))),
        Shrinkage::Auto => ledoit_wolf_gamma(centered.view()),
    };
    let nu = pooled.diag().sum() / f as f64;
    let mut cov = pooled * (1.0 - gamma);
    for i in 0..f {
        cov[[i, i]] += gamma * nu;
    }
    let m = DMatrix::from_fn(f, f, |r, c| cov[[r, c]]);
    let chol = Cholesky::new(m).ok_or_else(|| Error::Singular("shrunk LDA covariance is not positive definite; increase shrinkage".into()))?;
    let inv = chol.inverse();
    let precision = Array2::from_shape_fn((f, f), |(r, c)| 0.5 * (inv[(r, c)] + inv[(c, r)]));
    let coef = means.dot(&precision);
    let log_priors: Vec<f64> = counts.iter().map(|&c| (c as f64 / n as f64).ln()).collect();
    let intercept = (0..class_count).map(|k| -0.5 * coef.row(k).dot(&means.row(k)) + log_priors[k]).collect();
    Ok(LdaModel { means, covariance: cov, precision, log_priors, gamma, coef, intercept })
}

impl LdaModel {
    pub fn class_count(&self) -> usize {
        self.means.nrows()
    }

    pub fn features(&self) -> usize {
        self.means.ncols()
    }

    pub fn decision(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.features() {
            return Err(Error::shape(format!("LDA expects {} features, got {}", self.features(), x.ncols())));
        }
        let mut d = x.dot(&self.coef.t());
        for mut row in d.axis_iter_mut(Axis(0)) {
            row += &ArrayView1::from(&self.intercept[..]);
        }
        Ok(d)
    }

    /// Posterior class probabilities, one row per sample.
    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut d = self.decision(x)?;
        softmax_rows(&mut d);
        Ok(d)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self.decision(x)?.axis_iter(Axis(0)).map(argmax).collect())
    }
}

/// `N x D x T` trials after a per-timepoint spatial projection
/// `D x C` (and optional channel mean removal).
pub fn project_trials(trials: ArrayView3<'_, f64>, projection: ArrayView2<'_, f64>, mean: Option<&[f64]>) -> Result<Array3<f64>> {
    let (n, c, t) = trials.dim();
    if projection.ncols() != c {
        return Err(Error::shape(format!("projection expects {} channels, trials have {c}", projection.ncols())));
    }
    let d = projection.nrows();
    let mut out = Array3::zeros((n, d, t));
    for i in 0..n {
        let mut x = trials.index_axis(Axis(0), i).to_owned();
        if let Some(mu) = mean {
            for (mut row, &m) in x.axis_iter_mut(Axis(0)).zip(mu) {
                row -= m;
            }
        }
        out.index_axis_mut(Axis(0), i).assign(&projection.dot(&x));
    }
    Ok(out)
}

/// Flattens `[start, start + len)` of every trial channel-major.
fn window_features(x: &Array3<f64>, start: usize, len: usize) -> Array2<f64> {
    let (n, d, _) = x.dim();
    let w = x.slice(s![.., .., start..start + len]);
    Array2::from_shape_vec((n, d * len), w.iter().copied().collect()).expect("window shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeWindow {
    Full,
    /// Windows of `len` samples every `stride` samples; windows that would
    /// run past the trial end are dropped.
    Sliding { len: usize, stride: usize },
}

impl DecodeWindow {
    /// Sliding window of `ms` milliseconds with stride 1.
    pub fn sliding_ms(ms: f64, fs: f64) -> Self {
        DecodeWindow::Sliding { len: ((ms * fs / 1000.0).round() as usize).max(1), stride: 1 }
    }

    pub fn starts(&self, t: usize) -> Result<(Vec<usize>, usize)> {
        match *self {
            DecodeWindow::Full => Ok((vec![0], t)),
            DecodeWindow::Sliding { len, stride } => {
                if len == 0 || stride == 0 || len > t {
                    return Err(Error::shape(format!("window of {len} samples (stride {stride}) on {t}-sample trials")));
                }
                Ok(((0..=t - len).step_by(stride).collect(), len))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScores {
    pub starts: Vec<usize>,
    pub len: usize,
    pub accuracy: Vec<f64>,
}

impl WindowScores {
    pub fn peak(&self) -> (usize, f64) {
        let i = argmax(ArrayView1::from(&self.accuracy[..]));
        (self.starts[i], self.accuracy[i])
    }
}

/// One LDA per window, fitted on `train` features and scored on `test`.
pub fn window_decode(
    train: &Array3<f64>,
    train_labels: &[usize],
    test: &Array3<f64>,
    test_labels: &[usize],
    class_count: usize,
    window: DecodeWindow,
    shrinkage: Shrinkage,
) -> Result<WindowScores> {
    let t = train.dim().2;
    if test.dim().2 != t {
        return Err(Error::shape("train and test trials differ in length"));
    }
    let (starts, len) = window.starts(t)?;
    let accuracy = starts
        .par_iter()
        .map(|&st| {
            let lda = fit_lda(window_features(train, st, len).view(), train_labels, class_count, shrinkage)?;
            Ok(accuracy(&lda.predict(window_features(test, st, len).view())?, test_labels))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(WindowScores { starts, len, accuracy })
}

/// Full-epoch LDA on spatially projected trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedLda {
    /// `D x C`.
    pub projection: Array2<f64>,
    pub mean: Option<Vec<f64>>,
    pub lda: LdaModel,
}

impl ProjectedLda {
    pub fn fit(train: &EpochedDataset, projection: Array2<f64>, mean: Option<Vec<f64>>, shrinkage: Shrinkage) -> Result<Self> {
        let x = project_trials(train.trials().view(), projection.view(), mean.as_deref())?;
        let t = x.dim().2;
        let lda = fit_lda(window_features(&x, 0, t).view(), train.labels(), train.class_count(), shrinkage)?;
        Ok(Self { projection, mean, lda })
    }
}

impl Classifier for ProjectedLda {
    fn class_count(&self) -> usize {
        self.lda.class_count()
    }

    fn predict_proba(&self, trials: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        let x = project_trials(trials, self.projection.view(), self.mean.as_deref())?;
        let t = x.dim().2;
        self.lda.predict_proba(window_features(&x, 0, t).view())
    }
}

fn check_pair(train: &EpochedDataset, test: &EpochedDataset) -> Result<()> {
    if train.channels() != test.channels() || train.timesteps() != test.timesteps() {
        return Err(Error::shape("train and test trials differ in shape"));
    }
    Ok(())
}

/// LDA on the network's learned spatial projection.
pub fn lda_nn_pipeline(train: &EpochedDataset, test: &EpochedDataset, net: &LinearNetModel, window: DecodeWindow, shrinkage: Shrinkage) -> Result<WindowScores> {
    check_pair(train, test)?;
    let w = net.w_dr();
    let a = project_trials(train.trials().view(), w.view(), None)?;
    let b = project_trials(test.trials().view(), w.view(), None)?;
    window_decode(&a, train.labels(), &b, test.labels(), train.class_count(), window, shrinkage)
}

/// LDA on the leading `components` principal components of the pooled
/// training samples.
pub fn lda_pca_pipeline(train: &EpochedDataset, test: &EpochedDataset, components: usize, window: DecodeWindow, shrinkage: Shrinkage) -> Result<WindowScores> {
    check_pair(train, test)?;
    let (w, mean) = pca_projection(train, components)?;
    let a = project_trials(train.trials().view(), w.view(), Some(&mean))?;
    let b = project_trials(test.trials().view(), w.view(), Some(&mean))?;
    window_decode(&a, train.labels(), &b, test.labels(), train.class_count(), window, shrinkage)
}

/// `D x C` PCA loadings and channel means of the pooled training samples.
pub fn pca_projection(train: &EpochedDataset, components: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let pooled = crate::linmodels::pooled_samples(train);
    let p = fit_pca(pooled.view(), components.min(train.channels()))?;
    Ok((p.basis.t().to_owned(), p.mean.clone()))
}

/// Stratified `k`-fold test index sets.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > labels.len() {
        return Err(Error::Stratify(format!("{folds} folds for {} trials", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = rng_from(seed);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for class in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        for j in permutation(members.len(), &mut rng) {
            out[next % folds].push(members[j]);
            next += 1;
        }
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

/// Complement of `test` in `0..n`.
pub fn complement(test: &[usize], n: usize) -> Vec<usize> {
    let mut mask = vec![true; n];
    test.iter().for_each(|&i| mask[i] = false);
    (0..n).filter(|&i| mask[i]).collect()
}

/// Pairwise accuracies from multiclass probabilities: entry `(i, j)` is
/// the fraction of class-`i` and class-`j` trials assigned to the right one
/// of the two by comparing only `p_i` and `p_j` (ties to the lower index).
pub fn pairwise_from_multiclass(probabilities: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array2<f64>> {
    let (n, k) = probabilities.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} probability rows but {} labels", labels.len())));
    }
    for (i, row) in probabilities.axis_iter(Axis(0)).enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Normalization(format!("probability row {i} sums to {s}")));
        }
    }
    let mut out = Array2::from_elem((k, k), f64::NAN);
    for i in 0..k {
        for j in i + 1..k {
            let (mut hit, mut total) = (0usize, 0usize);
            for (r, &l) in labels.iter().enumerate() {
                if l != i && l != j {
                    continue;
                }
                total += 1;
                let pred = if probabilities[[r, j]] > probabilities[[r, i]] { j } else { i };
                hit += usize::from(pred == l);
            }
            let acc = if total == 0 { f64::NAN } else { hit as f64 / total as f64 };
            out[[i, j]] = acc;
            out[[j, i]] = acc;
        }
    }
    Ok(out)
}

/// Mean of the off-diagonal entries that are defined.
pub fn mean_off_diagonal(m: ArrayView2<'_, f64>) -> f64 {
    let k = m.nrows();
    let vals: Vec<f64> = (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[[i, j]]).filter(|v| !v.is_nan()).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Activation patterns `A = Sigma_x W Sigma_s^-1` of extraction filters
/// `W: F x K`. With `uncorrelated_shortcut` a singular latent covariance
/// falls back to `Sigma_x W`.
pub fn haufe_transform(w: ArrayView2<'_, f64>, data_cov: ArrayView2<'_, f64>, latent_cov: ArrayView2<'_, f64>, uncorrelated_shortcut: bool) -> Result<Array2<f64>> {
    let (f, k) = w.dim();
    if data_cov.dim() != (f, f) || latent_cov.dim() != (k, k) {
        return Err(Error::shape(format!("Haufe: W {f}x{k}, data covariance {:?}, latent covariance {:?}", data_cov.dim(), latent_cov.dim())));
    }
    let sw = data_cov.dot(&w);
    let m = DMatrix::from_fn(k, k, |r, c| latent_cov[[r, c]]);
    let scale = (0..k).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    match m.lu().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) && scale > 0.0 && inv.norm() * scale < 1e12 => {
            let inv = Array2::from_shape_fn((k, k), |(r, c)| inv[(r, c)]);
            Ok(sw.dot(&inv))
        }
        _ if uncorrelated_shortcut => Ok(sw),
        _ => Err(Error::Singular("latent covariance is singular".into())),
    }
}

/// `W' Sigma_x W`, the covariance of the decoded latent sources.
pub fn latent_covariance(w: ArrayView2<'_, f64>, data_cov: ArrayView2<'_, f64>) -> Array2<f64> {
    w.t().dot(&data_cov.dot(&w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearNetConfig {
    /// Width of the spatial projection, clamped to the channel count.
    pub k_dr: usize,
    pub widths: Vec<usize>,
    /// Dropout before each affine layer.
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimKind,
    /// Stop when validation accuracy has not improved for this many
    /// epochs; needs a validation set.
    pub early_stopping: Option<usize>,
    pub seed: u64,
}

impl Default for LinearNetConfig {
    fn default() -> Self {
        Self { k_dr: 80, widths: vec![1000, 300], dropout: 0.7, epochs: 2000, lr: 1e-4, optimizer: OptimKind::Adam, early_stopping: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

/// All-linear network: per-timepoint projection `dr.w: [K_dr, C, 1]`,
/// flatten, then affine layers `fc{i}.w/b` with dropout before each.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNetModel {
    pub channels: usize,
    pub timesteps: usize,
    pub class_count: usize,
    pub k_dr: usize,
    pub widths: Vec<usize>,
    pub dropout: f64,
    pub params: ParamStore,
    pub history: EpochLog,
}

impl LinearNetModel {
    pub fn new(channels: usize, timesteps: usize, class_count: usize, config: &LinearNetConfig) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let mut k_dr = config.k_dr.max(1);
        if k_dr > channels {
            log::warn!("projection width {k_dr} clamped to the {channels} channels");
            k_dr = channels;
        }
        let mut rng = rng_from(derive_seed(config.seed, 0));
        let mut params = ParamStore::new();
        params.add_xavier("dr.w", &[k_dr, channels, 1], channels, k_dr, &mut rng);
        let mut fin = k_dr * timesteps;
        let mut widths = config.widths.clone();
        widths.push(class_count);
        for (i, &w) in widths.iter().enumerate() {
            params.add_xavier(&format!("fc{i}.w"), &[fin, w], fin, w, &mut rng);
            params.add_zeros(&format!("fc{i}.b"), &[w]);
            fin = w;
        }
        widths.pop();
        Ok(Self { channels, timesteps, class_count, k_dr, widths: config.widths.clone(), dropout: config.dropout, params, history: EpochLog::default() })
    }

    /// Logits `[B, K]` for `x: [B, C, T]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.p("dr.w")?;
        let mut h = g.conv1d(x, w, None, 1)?;
        h = g.flatten(h)?;
        for i in 0..=self.widths.len() {
            h = g.dropout(h, self.dropout)?;
            let (w, b) = (g.p(&format!("fc{i}.w"))?, g.p(&format!("fc{i}.b"))?);
            h = g.affine(h, w, Some(b))?;
        }
        Ok(h)
    }

    /// The learned `K_dr x C` spatial projection.
    pub fn w_dr(&self) -> Array2<f64> {
        let t = self.params.get("dr.w").expect("dr.w");
        Array2::from_shape_vec((self.k_dr, self.channels), t.data.clone()).expect("dr.w shape")
    }

    pub fn logits(&self, trials: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        let (n, c, t) = trials.dim();
        if c != self.channels || t != self.timesteps {
            return Err(Error::shape(format!("network expects {}x{} trials, got {c}x{t}", self.channels, self.timesteps)));
        }
        let mut out = Array2::zeros((n, self.class_count));
        for start in (0..n).step_by(256) {
            let end = (start + 256).min(n);
            let chunk = trials.slice(s![start..end, .., ..]);
            let mut g = Graph::new(&self.params);
            let x = g.input(Tensor::from_vec(&[end - start, c, t], chunk.iter().copied().collect())?);
            let y = self.forward(&mut g, x)?;
            out.slice_mut(s![start..end, ..]).assign(&Array2::from_shape_vec((end - start, self.class_count), g.value(y).data.clone()).expect("logit shape"));
        }
        Ok(out)
    }

    /// The whole network composed into one affine map on flattened
    /// `C x T` trials: returns `(A: [C T, K], b: [K])`.
    pub fn collapse(&self) -> (Array2<f64>, Vec<f64>) {
        let layer = |i: usize| {
            let w = self.params.get(&format!("fc{i}.w")).unwrap();
            let b = self.params.get(&format!("fc{i}.b")).unwrap();
            (Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone()).unwrap(), ndarray::Array1::from(b.data.clone()))
        };
        let (mut m, mut b) = layer(0);
        for i in 1..=self.widths.len() {
            let (w, bi) = layer(i);
            m = m.dot(&w);
            b = b.dot(&w) + bi;
        }
        let wdr = self.w_dr();
        let t = self.timesteps;
        let k = self.class_count;
        let mut a = Array2::zeros((self.channels * t, k));
        for c in 0..self.channels {
            for tt in 0..t {
                let mut row = a.row_mut(c * t + tt);
                for kd in 0..self.k_dr {
                    row.scaled_add(wdr[[kd, c]], &m.row(kd * t + tt));
                }
            }
        }
        (a, b.to_vec())
    }
}

impl Classifier for LinearNetModel {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict_proba(&self, trials: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        let mut l = self.logits(trials)?;
        softmax_rows(&mut l);
        Ok(l)
    }
}

/// Full-batch training of the linear network with cross-entropy.
pub fn train_linear_net(train: &EpochedDataset, val: Option<&EpochedDataset>, config: &LinearNetConfig) -> Result<LinearNetModel> {
    let (n, c, t) = train.trials().dim();
    let mut model = LinearNetModel::new(c, t, train.class_count(), config)?;
    if config.early_stopping.is_some() && val.is_none() {
        return Err(Error::Config("early stopping needs a validation set".into()));
    }
    let mut opt = match config.optimizer {
        OptimKind::Adam => OptimState::adam(config.lr),
        OptimKind::Sgd => OptimState::sgd(config.lr),
    };
    let input = Tensor::from_vec(&[n, c, t], train.trials().iter().copied().collect())?;
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    for epoch in 0..config.epochs {
        let mut g = Graph::training(&model.params, derive_seed(config.seed, 100 + epoch as u64));
        let x = g.input(input.clone());
        let y = model.forward(&mut g, x)?;
        let loss = g.softmax_cross_entropy(y, train.labels())?;
        let lv = g.value(loss).data[0];
        if !lv.is_finite() {
            return Err(Error::Numerics(format!("linear network loss became {lv} in epoch {epoch}")));
        }
        let grads = g.backward(loss)?;
        drop(g);
        opt.step(&mut model.params, &grads)?;
        model.history.loss.push(lv);
        let acc = model.accuracy(train.trials().view(), train.labels())?;
        model.history.train_accuracy.push(acc);
        if let Some(v) = val {
            let va = model.accuracy(v.trials().view(), v.labels())?;
            model.history.val_accuracy.push(va);
            log::info!("linear net epoch {epoch}: loss {lv:.4} train {acc:.3} val {va:.3}");
            if let Some(p) = config.early_stopping {
                if va > best.0 {
                    best = (va, epoch, model.params.clone());
                } else if epoch - best.1 >= p {
                    model.params = best.2;
                    break;
                }
            }
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WavenetClassifierConfig {
    pub layers: usize,
    /// Convolution width; defaults to twice the input channels.
    pub hidden: Option<usize>,
    pub embed_dim: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for WavenetClassifierConfig {
    fn default() -> Self {
        Self { layers: 3, hidden: None, embed_dim: 10, fc_hidden: 64, dropout: 0.0, lr: 1e-3, epochs: 100, batch: 32, seed: 0 }
    }
}

/// Dilated kernel-2 convolutions with asinh, downsampled in time by the
/// receptive field, then a fully connected asinh layer and a linear read
/// out. Subject embeddings are concatenated to the input channels at every
/// timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct WavenetClassifierModel {
    pub channels: usize,
    pub timesteps: usize,
    pub class_count: usize,
    pub layers: usize,
    pub hidden: usize,
    pub subjects: usize,
    pub embed_dim: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub params: ParamStore,
    pub history: EpochLog,
}

impl WavenetClassifierModel {
    pub fn new(channels: usize, timesteps: usize, class_count: usize, subjects: usize, config: &WavenetClassifierConfig) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("the classifier needs at least one layer".into()));
        }
        let r = 1usize << config.layers;
        if timesteps < r {
            return Err(Error::shape(format!("{timesteps}-sample trials are shorter than the receptive field {r}")));
        }
        let hidden = config.hidden.unwrap_or(2 * channels);
        let e = if subjects > 0 { config.embed_dim } else { 0 };
        let mut rng = rng_from(derive_seed(config.seed, 0));
        let mut params = ParamStore::new();
        if subjects > 0 {
            let emb = (0..subjects * e).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            params.add("subj", Tensor::from_vec(&[subjects, e], emb)?);
        }
        let mut cin = channels + e;
        for l in 0..config.layers {
            params.add_xavier(&format!("c{l}.w"), &[hidden, cin, 2], 2 * cin, 2 * hidden, &mut rng);
            params.add_zeros(&format!("c{l}.b"), &[hidden]);
            cin = hidden;
        }
        let model = Self {
            channels,
            timesteps,
            class_count,
            layers: config.layers,
            hidden,
            subjects,
            embed_dim: e,
            fc_hidden: config.fc_hidden,
            dropout: config.dropout,
            params,
            history: EpochLog::default(),
        };
        let flat = hidden * model.downsampled_len();
        let mut params = model.params;
        params.add_xavier("fc.w", &[flat, config.fc_hidden], flat, config.fc_hidden, &mut rng);
        params.add_zeros("fc.b", &[config.fc_hidden]);
        params.add_xavier("out.w", &[config.fc_hidden, class_count], config.fc_hidden, class_count, &mut rng);
        params.add_zeros("out.b", &[class_count]);
        Ok(Self { params, ..model })
    }

    pub fn receptive_field(&self) -> usize {
        1 << self.layers
    }

    /// Length of the convolution output.
    pub fn conv_len(&self) -> usize {
        self.timesteps - self.receptive_field() + 1
    }

    /// Timesteps kept after striding by the receptive field; the last
    /// convolution output is always kept.
    pub fn downsampled_len(&self) -> usize {
        self.conv_len().div_ceil(self.receptive_field())
    }

    /// Logits `[B, K]`; `subjects` holds one index per trial when the
    /// model has an embedding table.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, subjects: Option<&[usize]>) -> Result<Var> {
        let b = g.shape(x)[0];
        let mut h = x;
        if self.subjects > 0 {
            let ids = subjects.ok_or_else(|| Error::Interface("model has subject embeddings; pass subject indices".into()))?;
            if ids.len() != b {
                return Err(Error::shape(format!("{} subject indices for {b} trials", ids.len())));
            }
            if let Some(&bad) = ids.iter().find(|&&s| s >= self.subjects) {
                return Err(Error::Index(format!("subject {bad} outside {} embeddings", self.subjects)));
            }
            let t = self.timesteps;
            let table = g.p("subj")?;
            let e = g.embedding(table, ids.iter().flat_map(|&s| std::iter::repeat_n(Some(s), t)).collect(), b)?;
            h = g.concat_channels(h, e)?;
        }
        for l in 0..self.layers {
            let (w, bias) = (g.p(&format!("c{l}.w"))?, g.p(&format!("c{l}.b"))?);
            h = g.conv1d(h, w, Some(bias), 1 << l)?;
            h = g.asinh(h);
        }
        let r = self.receptive_field();
        h = g.time_stride(h, (self.conv_len() - 1) % r, r)?;
        h = g.flatten(h)?;
        h = g.dropout(h, self.dropout)?;
        let (w, bias) = (g.p("fc.w")?, g.p("fc.b")?);
        h = g.affine(h, w, Some(bias))?;
        h = g.asinh(h);
        h = g.dropout(h, self.dropout)?;
        let (w, bias) = (g.p("out.w")?, g.p("out.b")?);
        g.affine(h, w, Some(bias))
    }

    pub fn probabilities(&self, trials: ArrayView3<'_, f64>, subjects: Option<&[usize]>) -> Result<Array2<f64>> {
        let (n, c, t) = trials.dim();
        if c != self.channels || t != self.timesteps {
            return Err(Error::shape(format!("classifier expects {}x{} trials, got {c}x{t}", self.channels, self.timesteps)));
        }
        let mut out = Array2::zeros((n, self.class_count));
        for start in (0..n).step_by(64) {
            let end = (start + 64).min(n);
            let chunk = trials.slice(s![start..end, .., ..]);
            let mut g = Graph::new(&self.params);
            let x = g.input(Tensor::from_vec(&[end - start, c, t], chunk.iter().copied().collect())?);
            let y = self.forward(&mut g, x, subjects.map(|s| &s[start..end]))?;
            let mut l = Array2::from_shape_vec((end - start, self.class_count), g.value(y).data.clone()).expect("logit shape");
            softmax_rows(&mut l);
            out.slice_mut(s![start..end, ..]).assign(&l);
        }
        Ok(out)
    }

    pub fn accuracy_with(&self, trials: ArrayView3<'_, f64>, labels: &[usize], subjects: Option<&[usize]>) -> Result<f64> {
        let p = self.probabilities(trials, subjects)?;
        Ok(accuracy(&p.axis_iter(Axis(0)).map(argmax).collect::<Vec<_>>(), labels))
    }

    /// Binds per-trial subject indices so the model can be used wherever a
    /// [`Classifier`] is expected.
    pub fn with_subjects<'a>(&'a self, subjects: &'a [usize]) -> WithSubjects<'a> {
        WithSubjects { model: self, subjects }
    }
}

impl Classifier for WavenetClassifierModel {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict_proba(&self, trials: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        self.probabilities(trials, None)
    }
}

pub struct WithSubjects<'a> {
    pub model: &'a WavenetClassifierModel,
    pub subjects: &'a [usize],
}

impl Classifier for WithSubjects<'_> {
    fn class_count(&self) -> usize {
        self.model.class_count
    }

    fn predict_proba(&self, trials: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        self.model.probabilities(trials, Some(self.subjects))
    }
}

/// Minibatch Adam training with cross-entropy; `subjects` (one index per
/// training trial) enables the embedding table.
pub fn train_wavenet_classifier(
    train: &EpochedDataset,
    subjects: Option<(&[usize], usize)>,
    val: Option<(&EpochedDataset, Option<&[usize]>)>,
    config: &WavenetClassifierConfig,
) -> Result<WavenetClassifierModel> {
    let (n, c, t) = train.trials().dim();
    let n_subj = subjects.map_or(0, |(_, s)| s);
    if let Some((ids, _)) = subjects {
        if ids.len() != n {
            return Err(Error::shape(format!("{} subject indices for {n} trials", ids.len())));
        }
    }
    let mut model = WavenetClassifierModel::new(c, t, train.class_count(), n_subj, config)?;
    let mut opt = OptimState::adam(config.lr);
    let mut rng = rng_from(derive_seed(config.seed, 1));
    let data = train.trials();
    let labels = train.labels();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = permutation(n, &mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch.max(1)) {
            let b = idx.len();
            let mut inp = Vec::with_capacity(b * c * t);
            for &i in idx {
                inp.extend(data.index_axis(Axis(0), i).iter().copied());
            }
            let tg: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let ids: Option<Vec<usize>> = subjects.map(|(s, _)| idx.iter().map(|&i| s[i]).collect());
            let mut g = Graph::training(&model.params, derive_seed(config.seed, 1000 + step));
            step += 1;
            let x = g.input(Tensor::from_vec(&[b, c, t], inp)?);
            let y = model.forward(&mut g, x, ids.as_deref())?;
            let loss = g.softmax_cross_entropy(y, &tg)?;
            let lv = g.value(loss).data[0];
            if !lv.is_finite() {
                return Err(Error::Numerics(format!("classifier loss became {lv} in epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            drop(g);
            opt.step(&mut model.params, &grads)?;
            loss_sum += lv;
            batches += 1;
        }
        model.history.loss.push(loss_sum / batches.max(1) as f64);
        if let Some((v, vs)) = val {
            let va = model.accuracy_with(v.trials().view(), v.labels(), vs)?;
            model.history.val_accuracy.push(va);
            log::info!("wavenet classifier epoch {epoch}: loss {:.4} val {va:.3}", loss_sum / batches.max(1) as f64);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn lda_symmetric_boundary() {
        let z = normals(200, 1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &v in &z {
            x.push(-1.0 + v);
            y.push(0);
            x.push(1.0 - v);
            y.push(1);
        }
        let f = Array2::from_shape_vec((400, 1), x).unwrap();
        let lda = fit_lda(f.view(), &y, 2, Shrinkage::Fixed(0.0)).unwrap();
        let p = lda.predict_proba(Array2::zeros((1, 1)).view()).unwrap();
        assert!(close(p[[0, 0]], 0.5, 1e-12));
        let p = lda.predict_proba(f.view()).unwrap();
        assert!(p.axis_iter(Axis(0)).all(|r| close(r.sum(), 1.0, 1e-10)));
    }

    #[test]
    fn full_shrinkage_is_nearest_mean() {
        let mut rng = rng_from(2);
        let n = 150;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| labels[i] as f64 * (j as f64 - 1.0) + 3.0 * rng.random::<f64>() * (j + 1) as f64);
        let lda = fit_lda(x.view(), &labels, 3, Shrinkage::Fixed(1.0)).unwrap();
        let pred = lda.predict(x.view()).unwrap();
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let d: Vec<f64> = (0..3).map(|k| (&row - &lda.means.row(k)).mapv(|v| v * v).sum()).collect();
            let nearest = (0..3).fold(0, |b, k| if d[k] < d[b] { k } else { b });
            assert_eq!(pred[i], nearest);
        }
    }

    #[test]
    fn separable_blobs_and_brute_force_rule() {
        let z = normals(400, 3);
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((200, 2), |(i, j)| z[2 * i + j] + if j == 0 { 10.0 * labels[i] as f64 } else { 0.0 });
        let lda = fit_lda(x.view(), &labels, 2, Shrinkage::Auto).unwrap();
        let pred = lda.predict(x.view()).unwrap();
        assert_eq!(accuracy(&pred, &labels), 1.0);
        // Decision rule evaluated directly from the stored parameters.
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let score = |k: usize| {
                let d = &row - &lda.means.row(k);
                -0.5 * d.dot(&lda.precision.dot(&d)) + lda.log_priors[k]
            };
            assert_eq!(pred[i], usize::from(score(1) > score(0)));
        }
    }

    #[test]
    fn ledoit_wolf_matches_direct_formula() {
        let z = normals(60 * 5, 4);
        let x = Array2::from_shape_fn((60, 5), |(i, j)| z[i * 5 + j] * (1.0 + j as f64) + if j == 1 { z[i * 5] } else { 0.0 });
        let mean = x.mean_axis(Axis(0)).unwrap();
        let xc = &x - &mean;
        let n = 60.0;
        let s = xc.t().dot(&xc) / n;
        let m = s.diag().sum() / 5.0;
        let target = Array2::<f64>::eye(5) * m;
        let d2: f64 = (&s - &target).mapv(|v| v * v).sum();
        let mut b2 = 0.0;
        for r in xc.axis_iter(Axis(0)) {
            let outer = Array2::from_shape_fn((5, 5), |(a, b)| r[a] * r[b]);
            b2 += (&outer - &s).mapv(|v| v * v).sum();
        }
        b2 /= n * n;
        let expect = b2.min(d2) / d2;
        assert!(close(ledoit_wolf_gamma(xc.view()), expect, 1e-12));
    }

    #[test]
    fn lda_scale_invariance_and_errors() {
        let z = normals(300, 5);
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((100, 3), |(i, j)| z[3 * i + j] + labels[i] as f64 * 0.5 * (j as f64 - 1.0));
        let a = fit_lda(x.view(), &labels, 3, Shrinkage::Auto).unwrap().predict(x.view()).unwrap();
        let x2 = &x * 37.0;
        let b = fit_lda(x2.view(), &labels, 3, Shrinkage::Auto).unwrap().predict(x2.view()).unwrap();
        assert_eq!(a, b);
        assert!(matches!(fit_lda(x.view(), &labels, 4, Shrinkage::Auto), Err(Error::ClassCount { class: 3 })));
    }

    #[test]
    fn pairwise_examples() {
        let p = Array2::from_shape_vec((1, 3), vec![0.2, 0.5, 0.3]).unwrap();
        let m = pairwise_from_multiclass(p.view(), &[1]).unwrap();
        assert_eq!(m[[1, 2]], 1.0);
        assert!(m[[0, 0]].is_nan());
        let labels = [0, 1, 2, 3, 2, 1];
        let perfect = Array2::from_shape_fn((6, 4), |(i, k)| if labels[i] == k { 1.0 } else { 0.0 });
        let m = pairwise_from_multiclass(perfect.view(), &labels).unwrap();
        assert_eq!(mean_off_diagonal(m.view()), 1.0);
        let bad = Array2::from_elem((1, 3), 0.5);
        assert!(matches!(pairwise_from_multiclass(bad.view(), &[0]), Err(Error::Normalization(_))));
    }

    #[test]
    fn pairwise_uniform_ties_favour_lower_class() {
        let labels = [0, 0, 1, 2, 2, 2, 1, 0];
        let p = Array2::from_elem((8, 3), 1.0 / 3.0);
        let m = pairwise_from_multiclass(p.view(), &labels).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                let ni = labels.iter().filter(|&&l| l == i).count() as f64;
                let nj = labels.iter().filter(|&&l| l == j).count() as f64;
                assert_eq!(m[[i, j]], ni / (ni + nj));
                assert_eq!(m[[j, i]], m[[i, j]]);
            }
        }
    }

    #[test]
    fn pairwise_on_two_classes_is_accuracy() {
        let mut rng = rng_from(6);
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..2)).collect();
        let p = Array2::from_shape_fn((50, 2), |_| 0.0);
        let p = p.mapv(|_: f64| rng.random::<f64>());
        let p = Array2::from_shape_fn((50, 2), |(i, k)| if k == 0 { p[[i, 0]] } else { 1.0 - p[[i, 0]] });
        let pred: Vec<usize> = p.axis_iter(Axis(0)).map(argmax).collect();
        let m = pairwise_from_multiclass(p.view(), &labels).unwrap();
        assert_eq!(m[[0, 1]], accuracy(&pred, &labels));
    }

    #[test]
    fn haufe_examples() {
        let w = Array2::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64 - 1.5);
        let a = haufe_transform(w.view(), Array2::eye(3).view(), Array2::eye(2).view(), false).unwrap();
        assert_eq!(a, w);
        let cov = Array2::from_diag(&ndarray::arr1(&[2.0, 3.0, 5.0]));
        let onehot = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 0.0]).unwrap();
        let a = haufe_transform(onehot.view(), cov.view(), Array2::eye(1).view(), false).unwrap();
        assert_eq!(a.column(0).to_vec(), vec![0.0, 3.0, 0.0]);
        let singular = Array2::zeros((1, 1));
        assert!(matches!(haufe_transform(onehot.view(), cov.view(), singular.view(), false), Err(Error::Singular(_))));
        let a = haufe_transform(onehot.view(), cov.view(), singular.view(), true).unwrap();
        assert_eq!(a.column(0).to_vec(), vec![0.0, 3.0, 0.0]);
    }

    #[test]
    fn haufe_recovers_forward_pattern() {
        let f = 6;
        let n = 4000;
        let pattern = [1.0, -0.5, 0.8, 0.0, 0.3, -1.2];
        let z = normals(n * (f + 2), 7);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        // Correlated noise: a shared nuisance source plus sensor noise.
        let nuisance = [0.9, 0.9, -0.2, 1.5, 0.4, 0.1];
        let x = Array2::from_shape_fn((n, f), |(i, j)| {
            let s = if labels[i] == 1 { 1.0 } else { -1.0 };
            pattern[j] * s + 2.0 * nuisance[j] * z[i * (f + 2) + f] + 0.5 * z[i * (f + 2) + j]
        });
        let lda = fit_lda(x.view(), &labels, 2, Shrinkage::Fixed(0.0)).unwrap();
        let w = (&lda.coef.row(1) - &lda.coef.row(0)).insert_axis(Axis(1)).to_owned();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let xc = &x - &mean;
        let cov = xc.t().dot(&xc) / (n - 1) as f64;
        let a = haufe_transform(w.view(), cov.view(), latent_covariance(w.view(), cov.view()).view(), false).unwrap();
        let a = a.column(0);
        let p = ArrayView1::from(&pattern[..]);
        let cos = a.dot(&p) / (a.dot(&a).sqrt() * p.dot(&p).sqrt());
        assert!(cos > 0.99, "{cos}");
        let wc = w.column(0);
        let raw = wc.dot(&p) / (wc.dot(&wc).sqrt() * p.dot(&p).sqrt());
        assert!(raw < cos);
    }

    fn constant_channel_set(n: usize, seed: u64) -> EpochedDataset {
        let (c, t) = (6, 20);
        let z = normals(n * c * t, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let trials = Array3::from_shape_fn((n, c, t), |(i, ch, tt)| z[(i * c + ch) * t + tt] + if ch == labels[i] { 2.0 } else { 0.0 });
        EpochedDataset::new(trials, labels, 100.0, 4).unwrap()
    }

    fn small_net() -> LinearNetConfig {
        LinearNetConfig { k_dr: 4, widths: vec![32, 16], dropout: 0.3, epochs: 150, lr: 3e-3, ..LinearNetConfig::default() }
    }

    #[test]
    fn linear_net_learns_and_collapses() {
        let train = constant_channel_set(200, 8);
        let val = constant_channel_set(80, 9);
        let net = train_linear_net(&train, Some(&val), &small_net()).unwrap();
        assert_eq!(*net.history.val_accuracy.last().unwrap(), 1.0);
        let smooth: Vec<f64> = net.history.train_accuracy.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        let drops = smooth.windows(2).filter(|w| w[1] < w[0] - 0.02).count();
        assert!(drops <= smooth.len() / 20, "{drops} drops");
        let (a, b) = net.collapse();
        let trials = val.trials();
        let flat = Array2::from_shape_vec((80, 6 * 20), trials.iter().copied().collect()).unwrap();
        let direct = flat.dot(&a) + ArrayView1::from(&b[..]);
        let logits = net.logits(trials.view()).unwrap();
        let err = (&direct - &logits).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(err < 1e-8, "{err}");
        let again = train_linear_net(&train, Some(&val), &small_net()).unwrap();
        assert_eq!(again.history.val_accuracy, net.history.val_accuracy);
    }

    #[test]
    fn untrained_net_is_at_chance() {
        let val = constant_channel_set(400, 10);
        let net = train_linear_net(&constant_channel_set(40, 11), None, &LinearNetConfig { epochs: 0, ..small_net() }).unwrap();
        let acc = net.accuracy(val.trials().view(), val.labels()).unwrap();
        let se = (0.25f64 * 0.75 / 400.0).sqrt();
        assert!((acc - 0.25).abs() < 4.0 * se + 0.1, "{acc}");
    }

    fn injected_set(n: usize, seed: u64) -> EpochedDataset {
        // 100 Hz, 0..400 ms; class signal on a weak direction at 100-200 ms.
        let (c, t) = (5, 40);
        let z = normals(n * (c + 1) * t, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let trials = Array3::from_shape_fn((n, c, t), |(i, ch, tt)| {
            let shared = 3.0 * z[(i * (c + 1) + c) * t + tt];
            let sig = if (10..20).contains(&tt) && ch < 2 { (2.0 * labels[i] as f64 - 1.0) * 0.6 * if ch == 0 { 1.0 } else { -1.0 } } else { 0.0 };
            shared + z[(i * (c + 1) + ch) * t + tt] + sig
        });
        EpochedDataset::new(trials, labels, 100.0, 2).unwrap()
    }

    #[test]
    fn sliding_window_peaks_in_injection() {
        let train = injected_set(300, 12);
        let test = injected_set(300, 13);
        let eye = Array2::eye(5);
        let a = project_trials(train.trials().view(), eye.view(), None).unwrap();
        let b = project_trials(test.trials().view(), eye.view(), None).unwrap();
        let win = DecodeWindow::sliding_ms(100.0, 100.0);
        let sc = window_decode(&a, train.labels(), &b, test.labels(), 2, win, Shrinkage::Auto).unwrap();
        assert_eq!(sc.starts.len(), 31);
        let (start, peak) = sc.peak();
        // Injection spans samples 10..20; allow one window either side.
        let centre = start + sc.len / 2;
        assert!((0..=30).contains(&centre), "{centre}");
        assert!(peak > 0.8, "{peak}");
        let se = (0.25f64 / 300.0).sqrt();
        for (&st, &acc) in sc.starts.iter().zip(&sc.accuracy) {
            if st >= 20 || st + sc.len <= 10 {
                assert!((acc - 0.5).abs() < 3.0 * se, "window at {st}: {acc}");
            }
        }
        assert!(DecodeWindow::Sliding { len: 41, stride: 1 }.starts(40).is_err());
        let full = window_decode(&a, train.labels(), &b, test.labels(), 2, DecodeWindow::Full, Shrinkage::Auto).unwrap();
        assert_eq!(full.starts, vec![0]);
    }

    #[test]
    fn folds_partition_and_stratify() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let folds = stratified_folds(&labels, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        for f in &folds {
            for k in 0..4 {
                assert_eq!(f.iter().filter(|&&i| labels[i] == k).count(), 2);
            }
            assert_eq!(complement(f, 40).len(), 32);
        }
    }

    #[test]
    fn classifier_shapes_and_receptive_field() {
        let cfg = WavenetClassifierConfig { layers: 4, ..WavenetClassifierConfig::default() };
        let m = WavenetClassifierModel::new(3, 16, 2, 0, &cfg).unwrap();
        assert_eq!(m.conv_len(), 1);
        assert_eq!(m.downsampled_len(), 1);
        assert!(matches!(WavenetClassifierModel::new(3, 15, 2, 0, &cfg), Err(Error::Shape(_))));
        let m = WavenetClassifierModel::new(3, 40, 2, 2, &WavenetClassifierConfig { layers: 2, ..cfg }).unwrap();
        assert_eq!(m.params.get("subj").unwrap().shape, vec![2, 10]);
        assert_eq!(m.conv_len(), 37);
        assert_eq!(m.downsampled_len(), 10);
        let x = Array3::zeros((2, 3, 40));
        assert!(matches!(m.probabilities(x.view(), None), Err(Error::Interface(_))));
        let p = m.probabilities(x.view(), Some(&[0, 1])).unwrap();
        assert!(p.axis_iter(Axis(0)).all(|r| close(r.sum(), 1.0, 1e-12)));
    }
}
