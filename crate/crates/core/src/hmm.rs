//! Gaussian hidden Markov models: Baum-Welch, Viterbi, time-delay
//! embedding, and the state summary statistics used to compare real and
//! generated data.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{epoch, MultichannelSeries};
use crate::error::{Error, Result};
use crate::linmodels::{fit_pca, PcaProjection};
use crate::rng::{derive_seed, rng_from};
use crate::spectral::{Welch, Window};

/// Stacks `lags` shifted copies of every channel, centred on each output
/// sample: output column `j` holds `x[c, j + k]` for `k in 0..lags` in row
/// `c * lags + k`, and is centred on input sample `j + (lags - 1) / 2`.
pub fn tde_embed(x: ArrayView2<'_, f64>, lags: usize) -> Result<Array2<f64>> {
    let (c, t) = x.dim();
    if lags == 0 || t < lags || (lags > 1 && t == lags) {
        return Err(Error::shape(format!("{t} samples cannot be embedded with {lags} lags")));
    }
    let n = t - lags + 1;
    Ok(Array2::from_shape_fn((c * lags, n), |(r, j)| x[[r / lags, j + r % lags]]))
}

/// Front end applied before the HMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub lags: usize,
    pub pca: Option<PcaProjection>,
}

impl Preprocess {
    /// Samples dropped at the start of the series by the embedding.
    pub fn offset(&self) -> usize {
        (self.lags.max(1) - 1) / 2
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let e = if self.lags > 1 { tde_embed(x, self.lags)? } else { x.to_owned() };
        Ok(match &self.pca {
            Some(p) => p.transform(e.view()),
            None => e,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmConfig {
    pub states: usize,
    pub max_iters: usize,
    /// Stop when the log-likelihood gain falls below this.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// TDE lag count (1 disables embedding).
    pub lags: usize,
    /// PCA dimensionality after embedding, clamped to the embedded rank.
    pub pca: Option<usize>,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self { states: 8, max_iters: 100, tol: 1e-6, restarts: 3, seed: 0, lags: 1, pca: None }
    }
}

/// Gaussian-observation HMM over `D`-dimensional features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub pi: Vec<f64>,
    /// Row-stochastic transitions, `a[i][j] = p(z_t = j | z_{t-1} = i)`.
    pub a: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
    pub preprocess: Preprocess,
    /// Log-likelihood after each EM iteration of the kept restart.
    pub log_likelihood: Vec<f64>,
}

struct Emission {
    chol: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
}

impl HmmModel {
    pub fn states(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn emission(&self) -> Result<Emission> {
        let d = self.dim();
        let mut chol = Vec::new();
        let mut log_norm = Vec::new();
        for (i, cov) in self.covs.iter().enumerate() {
            let m = DMatrix::from_fn(d, d, |r, c| cov[r][c]);
            let ch = Cholesky::new(m).ok_or_else(|| Error::Numerics(format!("state {i} covariance is not positive definite")))?;
            let l = ch.l();
            let log_det: f64 = 2.0 * (0..d).map(|k| l[(k, k)].ln()).sum::<f64>();
            log_norm.push(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det));
            chol.push(l);
        }
        Ok(Emission { chol, log_norm })
    }

    /// Log-densities `T x K` of every column of `y` (already preprocessed).
    fn log_emissions(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (d, t) = y.dim();
        if d != self.dim() {
            return Err(Error::shape(format!("model has dimension {}, data {d}", self.dim())));
        }
        let em = self.emission()?;
        let k = self.states();
        let mut out = Array2::zeros((t, k));
        let mut z = DVector::zeros(d);
        for i in 0..k {
            let l = &em.chol[i];
            for tt in 0..t {
                for r in 0..d {
                    z[r] = y[[r, tt]] - self.means[i][r];
                }
                // Forward substitution: solve L w = z in place.
                for r in 0..d {
                    let mut s = z[r];
                    for c in 0..r {
                        s -= l[(r, c)] * z[c];
                    }
                    z[r] = s / l[(r, r)];
                }
                out[[tt, i]] = em.log_norm[i] - 0.5 * z.norm_squared();
            }
        }
        Ok(out)
    }

    /// Scaled forward-backward on preprocessed features: state posteriors
    /// `T x K`, expected transition counts and the log-likelihood.
    fn forward_backward(&self, log_b: &Array2<f64>) -> (Array2<f64>, Vec<Vec<f64>>, f64) {
        let (t, k) = log_b.dim();
        let mut b = Array2::zeros((t, k));
        let mut shift = vec![0.0; t];
        for tt in 0..t {
            let m = log_b.row(tt).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            shift[tt] = m;
            for i in 0..k {
                b[[tt, i]] = (log_b[[tt, i]] - m).exp();
            }
        }
        let mut alpha = Array2::zeros((t, k));
        let mut scale = vec![0.0; t];
        for i in 0..k {
            alpha[[0, i]] = self.pi[i] * b[[0, i]];
        }
        for tt in 0..t {
            if tt > 0 {
                for j in 0..k {
                    let s: f64 = (0..k).map(|i| alpha[[tt - 1, i]] * self.a[i][j]).sum();
                    alpha[[tt, j]] = s * b[[tt, j]];
                }
            }
            let c: f64 = alpha.row(tt).sum();
            scale[tt] = c;
            alpha.row_mut(tt).mapv_inplace(|v| v / c);
        }
        let mut beta = Array2::from_elem((t, k), 1.0);
        for tt in (0..t.saturating_sub(1)).rev() {
            for i in 0..k {
                let s: f64 = (0..k).map(|j| self.a[i][j] * b[[tt + 1, j]] * beta[[tt + 1, j]]).sum();
                beta[[tt, i]] = s / scale[tt + 1];
            }
        }
        let mut gamma = &alpha * &beta;
        for mut row in gamma.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let mut xi = vec![vec![0.0; k]; k];
        for tt in 1..t {
            for i in 0..k {
                let ai = alpha[[tt - 1, i]];
                for j in 0..k {
                    xi[i][j] += ai * self.a[i][j] * b[[tt, j]] * beta[[tt, j]] / scale[tt];
                }
            }
        }
        let ll = scale.iter().map(|c| c.ln()).sum::<f64>() + shift.iter().sum::<f64>();
        (gamma, xi, ll)
    }

    /// State posteriors `T' x K` of a raw series (after preprocessing).
    pub fn posteriors(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let y = self.preprocess.apply(x)?;
        let lb = self.log_emissions(y.view())?;
        Ok(self.forward_backward(&lb).0)
    }

    /// Log-likelihood of a raw series.
    pub fn score(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        let y = self.preprocess.apply(x)?;
        let lb = self.log_emissions(y.view())?;
        Ok(self.forward_backward(&lb).2)
    }

    /// Most probable state path of a raw series; its first sample is
    /// aligned with input sample `preprocess.offset()`.
    pub fn viterbi(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let y = self.preprocess.apply(x)?;
        let lb = self.log_emissions(y.view())?;
        Ok(viterbi_path(&self.pi, &self.a, &lb))
    }
}

/// MAP path for log-emissions `T x K`; ties go to the lowest state index.
pub fn viterbi_path(pi: &[f64], a: &[Vec<f64>], log_b: &Array2<f64>) -> Vec<usize> {
    let (t, k) = log_b.dim();
    if t == 0 {
        return Vec::new();
    }
    let la: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let mut delta: Vec<f64> = (0..k).map(|i| pi[i].ln() + log_b[[0, i]]).collect();
    let mut back = vec![vec![0usize; k]; t];
    let mut next = vec![0.0; k];
    for tt in 1..t {
        for j in 0..k {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for i in 0..k {
                let v = delta[i] + la[i][j];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + log_b[[tt, j]];
            back[tt][j] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut state = (0..k).fold(0, |m, i| if delta[i] > delta[m] { i } else { m });
    let mut path = vec![0; t];
    for tt in (0..t).rev() {
        path[tt] = state;
        state = back[tt][state];
    }
    path
}

/// Log-probability of a given state path under the model.
pub fn path_log_prob(pi: &[f64], a: &[Vec<f64>], log_b: &Array2<f64>, path: &[usize]) -> f64 {
    let mut s = pi[path[0]].ln() + log_b[[0, path[0]]];
    for tt in 1..path.len() {
        s += a[path[tt - 1]][path[tt]].ln() + log_b[[tt, path[tt]]];
    }
    s
}

fn preprocess(x: ArrayView2<'_, f64>, cfg: &HmmConfig) -> Result<(Preprocess, Array2<f64>)> {
    let lags = cfg.lags.max(1);
    let mut pre = Preprocess { lags, pca: None };
    let e = pre.apply(x)?;
    if let Some(d) = cfg.pca {
        let d = d.min(e.nrows()).min(e.ncols().saturating_sub(1)).max(1);
        let p = fit_pca(e.t(), d)?;
        let y = p.transform(e.view());
        pre.pca = Some(p);
        return Ok((pre, y));
    }
    Ok((pre, e))
}

/// Fits a Gaussian HMM by Baum-Welch with `restarts` seeded
/// initialisations (nearest-centroid assignment from random data points);
/// the restart with the highest final log-likelihood is kept. Each M-step
/// adds `1e-6 x` the mean feature variance to every covariance diagonal.
pub fn fit_hmm(x: ArrayView2<'_, f64>, cfg: &HmmConfig) -> Result<HmmModel> {
    let k = cfg.states;
    if k == 0 {
        return Err(Error::Config("an HMM needs at least one state".into()));
    }
    let (pre, y) = preprocess(x, cfg)?;
    let (d, t) = y.dim();
    if t < 2 {
        return Err(Error::shape(format!("{t} samples are too few for an HMM")));
    }
    if t < 10 * k * d {
        log::warn!("fitting {k} states in {d} dimensions on only {t} samples");
    }
    let eps = ridge(y.view());
    let mut best: Option<HmmModel> = None;
    for restart in 0..cfg.restarts.max(1) {
        let init = initial_model(y.view(), k, eps, derive_seed(cfg.seed, restart as u64), pre.clone());
        let model = em(y.view(), init, cfg, eps)?;
        let ll = *model.log_likelihood.last().unwrap();
        if best.as_ref().is_none_or(|b| ll > *b.log_likelihood.last().unwrap()) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

/// Diagonal loading applied to every covariance: `1e-6 x` the mean
/// feature variance.
fn ridge(y: ArrayView2<'_, f64>) -> f64 {
    let (d, t) = y.dim();
    let var: f64 = (0..d)
        .map(|r| {
            let row = y.row(r);
            let m = row.mean().unwrap_or(0.0);
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (t - 1) as f64
        })
        .sum();
    let eps = 1e-6 * var / d as f64;
    if eps > 0.0 { eps } else { 1e-12 }
}

fn initial_model(y: ArrayView2<'_, f64>, k: usize, eps: f64, seed: u64, pre: Preprocess) -> HmmModel {
    let (d, t) = y.dim();
    let mut rng = rng_from(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centroids.len() < k {
        let j = rng.random_range(0..t);
        centroids.push(y.column(j).to_vec());
    }
    let mut assign = vec![0usize; t];
    for tt in 0..t {
        let mut best = f64::INFINITY;
        for (i, c) in centroids.iter().enumerate() {
            let dist: f64 = (0..d).map(|r| (y[[r, tt]] - c[r]).powi(2)).sum();
            if dist < best {
                best = dist;
                assign[tt] = i;
            }
        }
    }
    let mut gamma = Array2::zeros((t, k));
    for (tt, &i) in assign.iter().enumerate() {
        gamma[[tt, i]] = 1.0;
    }
    let (means, covs) = gaussian_m_step(y, &gamma, eps);
    HmmModel {
        pi: vec![1.0 / k as f64; k],
        a: (0..k).map(|i| (0..k).map(|j| if i == j { 0.9 } else { 0.1 / (k - 1).max(1) as f64 }).collect()).collect(),
        means,
        covs,
        preprocess: pre,
        log_likelihood: Vec::new(),
    }
    .normalized()
}

impl HmmModel {
    fn normalized(mut self) -> Self {
        if self.pi.len() == 1 {
            self.a = vec![vec![1.0]];
        }
        self
    }
}

/// Weighted means and covariances; states with no weight keep an identity
/// covariance scaled by the mean feature variance.
fn gaussian_m_step(y: ArrayView2<'_, f64>, gamma: &Array2<f64>, eps: f64) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (d, t) = y.dim();
    let k = gamma.ncols();
    let mut means = vec![vec![0.0; d]; k];
    let mut covs = vec![vec![vec![0.0; d]; d]; k];
    let global: Vec<f64> = (0..d).map(|r| y.row(r).mean().unwrap_or(0.0)).collect();
    for i in 0..k {
        let w: f64 = gamma.column(i).sum();
        if w <= 1e-300 {
            means[i] = global.clone();
            for r in 0..d {
                covs[i][r][r] = 1.0 + eps;
            }
            continue;
        }
        for tt in 0..t {
            let g = gamma[[tt, i]];
            if g == 0.0 {
                continue;
            }
            for r in 0..d {
                means[i][r] += g * y[[r, tt]];
            }
        }
        means[i].iter_mut().for_each(|v| *v /= w);
        let mut diff = vec![0.0; d];
        for tt in 0..t {
            let g = gamma[[tt, i]];
            if g == 0.0 {
                continue;
            }
            for r in 0..d {
                diff[r] = y[[r, tt]] - means[i][r];
            }
            for r in 0..d {
                let gr = g * diff[r];
                for c in 0..=r {
                    covs[i][r][c] += gr * diff[c];
                }
            }
        }
        for r in 0..d {
            for c in 0..=r {
                let v = covs[i][r][c] / w;
                covs[i][r][c] = v;
                covs[i][c][r] = v;
            }
            covs[i][r][r] += eps;
        }
    }
    (means, covs)
}

fn em(y: ArrayView2<'_, f64>, mut model: HmmModel, cfg: &HmmConfig, eps: f64) -> Result<HmmModel> {
    let k = model.states();
    let mut lls = Vec::new();
    for _ in 0..cfg.max_iters.max(1) {
        let lb = model.log_emissions(y)?;
        let (gamma, xi, ll) = model.forward_backward(&lb);
        if !ll.is_finite() {
            return Err(Error::Numerics(format!("HMM log-likelihood became {ll}")));
        }
        let done = lls.last().is_some_and(|&prev: &f64| (ll - prev).abs() < cfg.tol);
        lls.push(ll);
        if done {
            break;
        }
        model.pi = gamma.row(0).to_vec();
        for i in 0..k {
            let s: f64 = xi[i].iter().sum();
            if s > 0.0 {
                model.a[i] = xi[i].iter().map(|v| v / s).collect();
            }
        }
        let (means, covs) = gaussian_m_step(y, &gamma, eps);
        model.means = means;
        model.covs = covs;
    }
    // The recorded likelihoods belong to the parameters before each update;
    // score the final parameters once more so the model and its last entry
    // agree.
    let lb = model.log_emissions(y)?;
    let ll = model.forward_backward(&lb).2;
    if lls.last().is_none_or(|&prev| (ll - prev).abs() > 0.0) {
        lls.push(ll);
    }
    model.log_likelihood = lls;
    Ok(model)
}

/// Per-state summary of a state timecourse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateStats {
    pub fractional_occupancy: Vec<f64>,
    /// Mean visit duration in seconds (NaN for unvisited states).
    pub mean_lifetime: Vec<f64>,
    /// Mean time between consecutive visit onsets of the state, seconds.
    pub mean_interval: Vec<f64>,
    /// Visit onsets per second; the first sample counts as an onset.
    pub switching_rate: Vec<f64>,
    pub visits: Vec<usize>,
}

/// Visits `(state, start, length)` of a timecourse.
pub fn visits(states: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=states.len() {
        if t == states.len() || states[t] != states[start] {
            out.push((states[start], start, t - start));
            start = t;
        }
    }
    out
}

/// Visit lengths in samples, grouped by state.
pub fn lifetimes(states: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); k];
    for (s, _, len) in visits(states) {
        if s < k {
            out[s].push(len);
        }
    }
    out
}

pub fn state_statistics(states: &[usize], k: usize, fs: f64) -> Result<StateStats> {
    if states.is_empty() {
        return Err(Error::shape("empty state timecourse"));
    }
    if let Some(&bad) = states.iter().find(|&&s| s >= k) {
        return Err(Error::Range(format!("state {bad} not below {k}")));
    }
    let t = states.len() as f64;
    let vs = visits(states);
    let mut fo = vec![0.0; k];
    let mut dur = vec![0.0; k];
    let mut n = vec![0usize; k];
    let mut onsets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &(s, start, len) in &vs {
        fo[s] += len as f64 / t;
        dur[s] += len as f64;
        n[s] += 1;
        onsets[s].push(start);
    }
    let lifetime = (0..k).map(|i| if n[i] > 0 { dur[i] / n[i] as f64 / fs } else { f64::NAN }).collect();
    let interval = (0..k)
        .map(|i| {
            let o = &onsets[i];
            if o.len() < 2 {
                f64::NAN
            } else {
                (o[o.len() - 1] - o[0]) as f64 / (o.len() - 1) as f64 / fs
            }
        })
        .collect();
    let switching = n.iter().map(|&v| v as f64 / (t / fs)).collect();
    Ok(StateStats { fractional_occupancy: fo, mean_lifetime: lifetime, mean_interval: interval, switching_rate: switching, visits: n })
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Welch spectra per state from the runs assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePsd {
    pub freqs: Vec<f64>,
    /// `power[state][channel][freq]`; NaN for a state without usable runs.
    pub power: Vec<Vec<Vec<f64>>>,
    pub segments: Vec<usize>,
    /// Runs shorter than one Welch segment, per state.
    pub skipped: Vec<usize>,
}

/// Each same-state run at least `seg_len` long contributes its own
/// half-overlapping Hann segments; shorter runs are skipped and counted.
pub fn state_psd(series: &MultichannelSeries, states: &[usize], k: usize, seg_len: usize) -> Result<StatePsd> {
    if states.len() != series.timesteps() {
        return Err(Error::shape(format!("{} states for {} samples", states.len(), series.timesteps())));
    }
    let c = series.channels();
    let mut welch: Vec<Vec<Welch>> = (0..k).map(|_| (0..c).map(|_| Welch::new(seg_len, Window::Hann, series.fs())).collect()).collect();
    let mut skipped = vec![0; k];
    let hop = (seg_len / 2).max(1);
    for (s, start, len) in visits(states) {
        if s >= k {
            return Err(Error::Range(format!("state {s} not below {k}")));
        }
        if len < seg_len {
            skipped[s] += 1;
            continue;
        }
        for ch in 0..c {
            let row = series.data().row(ch);
            let run: Vec<f64> = row.iter().skip(start).take(len).copied().collect();
            welch[s][ch].add_signal(&run, hop);
        }
    }
    let freqs = welch.first().and_then(|w| w.first()).map(Welch::freqs).unwrap_or_default();
    let segments = welch.iter().map(|w| w.first().map_or(0, Welch::segments)).collect();
    let power = welch.iter().map(|w| w.iter().map(Welch::mean_power).collect()).collect();
    Ok(StatePsd { freqs, power, segments, skipped })
}

/// One-hot `K x T` activation matrix of a state path.
pub fn one_hot(states: &[usize], k: usize) -> Array2<f64> {
    let mut m = Array2::zeros((k, states.len()));
    for (t, &s) in states.iter().enumerate() {
        m[[s, t]] = 1.0;
    }
    m
}

/// Trial-averaged state activation `K x W` around `onsets`.
pub fn evoked_state_timecourse(activation: ArrayView2<'_, f64>, fs: f64, onsets: &[usize], window: (i64, i64)) -> Result<Array2<f64>> {
    if onsets.is_empty() {
        return Err(Error::shape("no trials to average"));
    }
    let series = MultichannelSeries::new(activation.to_owned(), fs)?;
    let ds = epoch(&series, onsets, window, &vec![0; onsets.len()])?;
    Ok(ds.trials().mean_axis(Axis(0)).expect("nonempty"))
}
