//! PCA / whitening and linear autoregressive models.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EpochedDataset, MultichannelSeries};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Symmetric eigendecomposition with eigenvalues in descending order and
/// each eigenvector's largest-magnitude entry made positive.
pub fn sorted_eigen(cov: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let mut big = 0;
        for r in 1..n {
            if col[r].abs() > col[big].abs() {
                big = r;
            }
        }
        if col[big] < 0.0 {
            col.neg_mut();
        }
        vecs.set_column(k, &col);
        vals.push(eig.eigenvalues[i]);
    }
    (vals, vecs)
}

/// Principal component projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// `C x D` orthonormal columns.
    pub basis: Array2<f64>,
    /// Component variances, descending.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
    /// Fraction of total variance carried by each kept component.
    pub explained: Vec<f64>,
    /// Set when a kept component has (numerically) zero variance.
    pub rank_deficient: bool,
}

/// PCA of `N x C` samples (rows are observations).
pub fn fit_pca(samples: ArrayView2<'_, f64>, d: usize) -> Result<PcaProjection> {
    let (n, c) = samples.dim();
    if d > c {
        return Err(Error::shape(format!("cannot keep {d} components of {c} channels")));
    }
    if n < 2 {
        return Err(Error::shape(format!("PCA needs at least 2 samples, got {n}")));
    }
    let mean = samples.mean_axis(Axis(0)).unwrap();
    let centered = &samples - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let cov = DMatrix::from_fn(c, c, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let trace = cov.trace();
    let (vals, vecs) = sorted_eigen(&cov);
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
    let rank_deficient = vals[..d].iter().any(|&v| v <= tol);
    let basis = Array2::from_shape_fn((c, d), |(i, k)| vecs[(i, k)]);
    let explained = vals[..d].iter().map(|v| if trace > 0.0 { v / trace } else { 0.0 }).collect();
    Ok(PcaProjection {
        basis,
        eigenvalues: vals[..d].to_vec(),
        mean: mean.to_vec(),
        explained,
        rank_deficient,
    })
}

/// PCA over the timepoints of a `C x T` series.
pub fn fit_pca_series(series: &MultichannelSeries, d: usize) -> Result<PcaProjection> {
    fit_pca(series.data().t(), d)
}

/// Pools every timepoint of every trial into `(N * T) x C` samples.
pub fn pooled_samples(dataset: &EpochedDataset) -> Array2<f64> {
    let (n, c, t) = dataset.trials().dim();
    let mut out = Array2::zeros((n * t, c));
    for i in 0..n {
        let trial = dataset.trial(i);
        out.slice_mut(ndarray::s![i * t..(i + 1) * t, ..]).assign(&trial.t());
    }
    out
}

impl PcaProjection {
    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    /// Projects a `C x T` matrix to `D x T` component scores.
    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mean = ndarray::ArrayView1::from(&self.mean[..]);
        let centered = &x - &mean.insert_axis(Axis(1));
        self.basis.t().dot(&centered)
    }

    /// Maps `D x T` scores back to `C x T`.
    pub fn inverse_transform(&self, scores: ArrayView2<'_, f64>) -> Array2<f64> {
        let mean = ndarray::ArrayView1::from(&self.mean[..]);
        self.basis.dot(&scores) + mean.insert_axis(Axis(1))
    }

    pub fn apply_series(&self, series: &MultichannelSeries) -> Result<MultichannelSeries> {
        MultichannelSeries::new(self.transform(series.view()), series.fs())
    }

    /// Projects every trial.
    pub fn apply_dataset(&self, dataset: &EpochedDataset) -> Result<EpochedDataset> {
        let (n, _, t) = dataset.trials().dim();
        let mut out = Array3::zeros((n, self.components(), t));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i).assign(&self.transform(dataset.trial(i)));
        }
        dataset.with_trials(out)
    }
}

/// Fits a full-rank PCA rotation on `fit` (all channels kept), used to
/// decorrelate channels of any dataset with the same montage.
pub fn fit_whitener(fit: &EpochedDataset) -> Result<PcaProjection> {
    fit_pca(pooled_samples(fit).view(), fit.channels())
}

/// Rotates `data` into the principal axes of `fit`.
pub fn whiten(fit: &EpochedDataset, data: &EpochedDataset) -> Result<EpochedDataset> {
    fit_whitener(fit)?.apply_dataset(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArMode {
    /// One independent model per channel.
    Univariate,
    /// Joint model with `C x C` lag matrices.
    Multivariate,
}

/// Linear autoregressive model `x_t = sum_p A_p x_{t-p} + e_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub order: usize,
    pub mode: ArMode,
    /// `P` lag matrices, each `C x C`; diagonal in univariate mode.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    /// Innovation covariance `C x C`; diagonal in univariate mode.
    pub noise_cov: Vec<Vec<f64>>,
    pub fs: f64,
    /// Set when the normal equations needed ridge regularisation.
    pub regularized: bool,
}

/// Ridge strength, relative to the mean diagonal of the Gram matrix, used
/// when the normal equations are singular.
pub const AR_RIDGE: f64 = 1e-8;

/// Generated values beyond this magnitude abort generation.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Lagged Gram matrix `sum_t f_t f_t^T` and cross term `sum_t f_t y_t^T`,
/// where `f_t = [x_{t-1}; ...; x_{t-P}]` over rows `t = P..T`. Lag blocks
/// are filled with the shift recurrence, so the cost is `O(T P C^2)`.
fn lagged_gram(x: ArrayView2<'_, f64>, p: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (c, t) = x.dim();
    let k = c * p;
    let mut g = DMatrix::zeros(k, k);
    let mut b = DMatrix::zeros(k, c);
    // Block row 0: lag 0 against every lag j, and the cross term.
    for j in 0..p {
        for a in 0..c {
            for bb in 0..c {
                let mut s = 0.0;
                for tt in p..t {
                    s += x[[a, tt - 1]] * x[[bb, tt - 1 - j]];
                }
                g[(a, j * c + bb)] = s;
            }
        }
        for a in 0..c {
            for bb in 0..c {
                let mut s = 0.0;
                for tt in p..t {
                    s += x[[a, tt - 1 - j]] * x[[bb, tt]];
                }
                b[(j * c + a, bb)] = s;
            }
        }
    }
    // G_{i+1, j+1} = G_{i, j} + f(P-2-i) f(P-2-j)^T - f(T-2-i) f(T-2-j)^T.
    for i in 0..p.saturating_sub(1) {
        for j in i..p - 1 {
            for a in 0..c {
                for bb in 0..c {
                    let v = g[(i * c + a, j * c + bb)] + x[[a, p - 2 - i]] * x[[bb, p - 2 - j]]
                        - x[[a, t - 2 - i]] * x[[bb, t - 2 - j]];
                    g[((i + 1) * c + a, (j + 1) * c + bb)] = v;
                }
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
    }
    (g, b)
}

fn solve_normal(g: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = g.nrows();
    let max_diag = (0..k).map(|i| g[(i, i)]).fold(0.0, f64::max);
    if let Some(ch) = g.clone().cholesky() {
        let l = ch.l_dirty();
        let min_pivot = (0..k).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-13 * max_diag {
            return (ch.solve(b), false);
        }
    }
    let mean_diag = g.trace() / k as f64;
    let lambda = AR_RIDGE * mean_diag.max(f64::MIN_POSITIVE);
    let mut gr = g.clone();
    for i in 0..k {
        gr[(i, i)] += lambda;
    }
    let sol = match gr.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => gr.svd(true, true).solve(b, 1e-14).unwrap_or_else(|_| DMatrix::zeros(k, b.ncols())),
    };
    (sol, true)
}

/// Fits an AR(`order`) model by ordinary least squares without intercept.
pub fn fit_ar(series: &MultichannelSeries, order: usize, mode: ArMode) -> Result<ArModel> {
    let (c, t) = series.data().dim();
    if order == 0 {
        return Err(Error::Config("AR order must be at least 1".into()));
    }
    let per_fit = match mode {
        ArMode::Univariate => order,
        ArMode::Multivariate => order * c,
    };
    if t <= order + per_fit {
        return Err(Error::shape(format!(
            "AR({order}) needs more than {} samples, got {t}",
            order + per_fit
        )));
    }
    let x = series.view();
    let mut coefs = vec![vec![vec![0.0; c]; c]; order];
    let mut regularized = false;
    match mode {
        ArMode::Univariate => {
            for ch in 0..c {
                let row = x.slice(ndarray::s![ch..ch + 1, ..]);
                let (g, b) = lagged_gram(row, order);
                let (sol, reg) = solve_normal(&g, &b);
                regularized |= reg;
                for p in 0..order {
                    coefs[p][ch][ch] = sol[(p, 0)];
                }
            }
        }
        ArMode::Multivariate => {
            let (g, b) = lagged_gram(x, order);
            let (sol, reg) = solve_normal(&g, &b);
            regularized = reg;
            // sol is (P C) x C with sol[(p C + a, b)] = A_p[b][a].
            for p in 0..order {
                for a in 0..c {
                    for bb in 0..c {
                        coefs[p][bb][a] = sol[(p * c + a, bb)];
                    }
                }
            }
        }
    }
    let mut model = ArModel {
        order,
        mode,
        coefficients: coefs,
        noise_cov: vec![vec![0.0; c]; c],
        fs: series.fs(),
        regularized,
    };
    let resid = model.residuals(x);
    let n = resid.ncols();
    let dof = n.saturating_sub(per_fit).max(1) as f64;
    let mut cov = resid.dot(&resid.t()) / dof;
    if mode == ArMode::Univariate {
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    cov[[i, j]] = 0.0;
                }
            }
        }
    }
    model.noise_cov = (0..c).map(|i| cov.row(i).to_vec()).collect();
    Ok(model)
}

impl ArModel {
    /// Univariate model from per-channel coefficients (`C x P`) and
    /// innovation variances.
    pub fn univariate(coefs: &[Vec<f64>], noise_var: &[f64], fs: f64) -> Result<Self> {
        let c = coefs.len();
        let order = coefs.first().map_or(0, Vec::len);
        if order == 0 || coefs.iter().any(|r| r.len() != order) || noise_var.len() != c {
            return Err(Error::shape("univariate AR coefficients must be C x P with P >= 1"));
        }
        let mut coefficients = vec![vec![vec![0.0; c]; c]; order];
        let mut noise_cov = vec![vec![0.0; c]; c];
        for ch in 0..c {
            for p in 0..order {
                coefficients[p][ch][ch] = coefs[ch][p];
            }
            noise_cov[ch][ch] = noise_var[ch];
        }
        Ok(Self { order, mode: ArMode::Univariate, coefficients, noise_cov, fs, regularized: false })
    }

    pub fn channels(&self) -> usize {
        self.noise_cov.len()
    }

    /// Coefficient of lag `p + 1` (0-based `p`) for a univariate channel.
    pub fn coef(&self, channel: usize, p: usize) -> f64 {
        self.coefficients[p][channel][channel]
    }

    fn predict_at(&self, hist: &dyn Fn(usize, usize) -> f64, out: &mut [f64]) {
        let c = self.channels();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (p, a) in self.coefficients.iter().enumerate() {
            match self.mode {
                ArMode::Univariate => {
                    for ch in 0..c {
                        out[ch] += a[ch][ch] * hist(ch, p + 1);
                    }
                }
                ArMode::Multivariate => {
                    for i in 0..c {
                        let row = &a[i];
                        for j in 0..c {
                            out[i] += row[j] * hist(j, p + 1);
                        }
                    }
                }
            }
        }
    }

    /// One-step predictions for columns `P..T` of `x` (`C x (T - P)`).
    pub fn predict_one_step(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let (c, t) = x.dim();
        let p = self.order;
        let n = t.saturating_sub(p);
        let mut out = Array2::zeros((c, n));
        let mut buf = vec![0.0; c];
        for k in 0..n {
            let tt = k + p;
            self.predict_at(&|ch, lag| x[[ch, tt - lag]], &mut buf);
            for ch in 0..c {
                out[[ch, k]] = buf[ch];
            }
        }
        out
    }

    /// Residuals `x_t - xhat_t` for columns `P..T`.
    pub fn residuals(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let pred = self.predict_one_step(x);
        let p = self.order;
        &x.slice(ndarray::s![.., p..]) - &pred
    }

    /// Noise-free recursive forecast of `horizon` steps, continuing from the
    /// `P` columns of `x` that precede `start`.
    pub fn forecast(&self, x: ArrayView2<'_, f64>, start: usize, horizon: usize) -> Array2<f64> {
        let c = self.channels();
        let p = self.order;
        assert!(start >= p, "forecast start {start} has less than {p} samples of history");
        let mut out = Array2::<f64>::zeros((c, horizon));
        let mut buf = vec![0.0; c];
        for h in 0..horizon {
            {
                let out_ref = &out;
                self.predict_at(
                    &|ch, lag| if lag <= h { out_ref[[ch, h - lag]] } else { x[[ch, start + h - lag]] },
                    &mut buf,
                );
            }
            for ch in 0..c {
                out[[ch, h]] = buf[ch];
            }
        }
        out
    }

    fn noise_factor(&self) -> DMatrix<f64> {
        let c = self.channels();
        let cov = DMatrix::from_fn(c, c, |i, j| self.noise_cov[i][j]);
        let (vals, vecs) = sorted_eigen(&cov);
        let mut f = vecs.clone();
        for k in 0..c {
            let s = vals[k].max(0.0).sqrt();
            for i in 0..c {
                f[(i, k)] *= s;
            }
        }
        f
    }
}

/// Power spectral density matrix at each frequency:
/// `S(f) = H Sigma H^H / (2 pi)` with `H = (I - sum_p A_p e^{-i 2 pi f p / fs})^{-1}`.
pub fn ar_psd(model: &ArModel, freqs: &[f64], fs: f64) -> Result<Vec<DMatrix<Complex<f64>>>> {
    let c = model.channels();
    let sigma = DMatrix::from_fn(c, c, |i, j| Complex::new(model.noise_cov[i][j], 0.0));
    let mut out = Vec::with_capacity(freqs.len());
    for &f in freqs {
        if !(f >= 0.0 && f < fs / 2.0) {
            return Err(Error::Frequency(format!("PSD frequency {f} Hz outside [0, {}) Hz", fs / 2.0)));
        }
        let mut m = DMatrix::<Complex<f64>>::identity(c, c);
        for (p, a) in model.coefficients.iter().enumerate() {
            let phase = Complex::from_polar(1.0, -2.0 * std::f64::consts::PI * f * (p + 1) as f64 / fs);
            for i in 0..c {
                for j in 0..c {
                    m[(i, j)] -= phase * a[i][j];
                }
            }
        }
        let h = m
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("transfer matrix singular at {f} Hz")))?;
        let s = &h * &sigma * h.adjoint() / Complex::new(2.0 * std::f64::consts::PI, 0.0);
        out.push(s);
    }
    Ok(out)
}

/// Recursive generation from zero history with Gaussian innovations scaled
/// by `noise_scale`.
pub fn ar_generate(model: &ArModel, steps: usize, seed: u64, noise_scale: f64) -> Result<MultichannelSeries> {
    let c = model.channels();
    let p = model.order;
    let factor = model.noise_factor();
    let mut rng = rng_from(seed);
    let mut x = Array2::<f64>::zeros((c, steps + p));
    let mut buf = vec![0.0; c];
    let mut z = DVector::zeros(c);
    for k in 0..steps {
        let t = k + p;
        {
            let xr = &x;
            model.predict_at(&|ch, lag| xr[[ch, t - lag]], &mut buf);
        }
        for i in 0..c {
            z[i] = StandardNormal.sample(&mut rng);
        }
        let e = &factor * &z;
        for ch in 0..c {
            let v = buf[ch] + noise_scale * e[ch];
            if !(v.abs() <= DIVERGENCE_GUARD) {
                return Err(Error::Divergence { step: k, value: v });
            }
            x[[ch, t]] = v;
        }
    }
    MultichannelSeries::new(x.slice(ndarray::s![.., p..]).to_owned(), model.fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn ar2_series(phi: (f64, f64), sd: f64, n: usize, seed: u64) -> MultichannelSeries {
        let e = gaussian(n, seed);
        let mut x = vec![0.0; n];
        x[0] = 1.0;
        for t in 1..n {
            let x2 = if t >= 2 { x[t - 2] } else { 0.0 };
            x[t] = phi.0 * x[t - 1] + phi.1 * x2 + sd * e[t];
        }
        MultichannelSeries::from_channel(&x, 250.0).unwrap()
    }

    #[test]
    fn pca_axis_aligned() {
        let a = gaussian(20_000, 1);
        let b = gaussian(20_000, 2);
        let x = Array::from_shape_fn((20_000, 2), |(i, j)| if j == 1 { 2.0 * a[i] } else { b[i] });
        let p = fit_pca(x.view(), 2).unwrap();
        assert!((p.eigenvalues[0] / 4.0 - 1.0).abs() < 0.05);
        assert!((p.basis[[1, 0]] - 1.0).abs() < 1e-2);
        assert!((p.basis[[0, 1]] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn pca_complete_reconstruction_and_trace() {
        let v = gaussian(1000, 3);
        let x = Array::from_shape_fn((100, 10), |(i, j)| v[i * 10 + j] + 0.5 * v[i * 10 + (j + 1) % 10]);
        let p = fit_pca(x.view(), 10).unwrap();
        let s: f64 = p.explained.iter().sum();
        assert!((s - 1.0).abs() < 1e-10);
        let xt = x.t();
        let back = p.inverse_transform(p.transform(xt).view());
        for (a, b) in back.iter().zip(xt.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        let basis = DMatrix::from_fn(10, 10, |i, j| p.basis[[i, j]]);
        let gram = basis.transpose() * &basis;
        assert!((gram - DMatrix::identity(10, 10)).abs().max() < 1e-8);
        assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        // Projected covariance is diag(eigenvalues).
        let scores = p.transform(xt);
        let cov = crate::spectral::covariance_matrix(scores.view()).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let expected = if i == j { p.eigenvalues[i] } else { 0.0 };
                assert!((cov[[i, j]] - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_rank_flag_and_bounds() {
        let v = gaussian(200, 4);
        let x = Array::from_shape_fn((200, 2), |(i, _)| v[i]);
        let p = fit_pca(x.view(), 2).unwrap();
        assert!(p.rank_deficient);
        assert!(p.eigenvalues[1].abs() < 1e-10 * p.eigenvalues[0]);
        assert!(matches!(fit_pca(x.view(), 3), Err(Error::Shape(_))));
    }

    #[test]
    fn whitening_generalises() {
        let v = gaussian(3 * 2 * 2000, 5);
        let mix = |i: usize, j: usize, t: usize| {
            let a = v[(i * 2000 + t) * 2];
            let b = v[(i * 2000 + t) * 2 + 1];
            if j == 0 { a } else { 0.6 * a + b }
        };
        let trials = Array3::from_shape_fn((3, 2, 2000), |(i, j, t)| mix(i, j, t));
        let ds = EpochedDataset::from_labels(trials, vec![0, 1, 0], 100.0).unwrap();
        let train = ds.subset(&[0, 1]);
        let test = ds.subset(&[2]);
        let w = whiten(&train, &train).unwrap();
        let cov = crate::spectral::covariance_matrix(pooled_samples(&w).t()).unwrap();
        assert!(cov[[0, 1]].abs() / (cov[[0, 0]] * cov[[1, 1]]).sqrt() < 1e-6);
        let h = whiten(&train, &test).unwrap();
        let cov = crate::spectral::covariance_matrix(pooled_samples(&h).t()).unwrap();
        assert!(cov[[0, 1]].abs() / (cov[[0, 0]] * cov[[1, 1]]).sqrt() < 0.2);
    }

    #[test]
    fn ar2_recovery() {
        let (p1, _) = crate::sim::ar2_coefficients(10.0, 250.0).unwrap();
        let s = ar2_series((p1, -1.0), 0.1, 100_000, 6);
        let m = fit_ar(&s, 2, ArMode::Univariate).unwrap();
        assert!((m.coef(0, 0) - p1).abs() < 1e-2);
        assert!((m.coef(0, 1) + 1.0).abs() < 1e-2);

        let clean = ar2_series((p1, -1.0), 0.0, 2000, 6);
        let m = fit_ar(&clean, 2, ArMode::Univariate).unwrap();
        assert!((m.coef(0, 0) - p1).abs() < 1e-8);
        assert!((m.coef(0, 1) + 1.0).abs() < 1e-8);
    }

    #[test]
    fn gram_recurrence_matches_direct() {
        let v = gaussian(2 * 300, 7);
        let x = Array::from_shape_vec((2, 300), v).unwrap();
        let p = 4;
        let (g, b) = lagged_gram(x.view(), p);
        for i in 0..p * 2 {
            for j in 0..p * 2 {
                let (li, ci) = (i / 2, i % 2);
                let (lj, cj) = (j / 2, j % 2);
                let direct: f64 = (p..300).map(|t| x[[ci, t - 1 - li]] * x[[cj, t - 1 - lj]]).sum();
                assert!((g[(i, j)] - direct).abs() < 1e-9);
            }
            for o in 0..2 {
                let (li, ci) = (i / 2, i % 2);
                let direct: f64 = (p..300).map(|t| x[[ci, t - 1 - li]] * x[[o, t]]).sum();
                assert!((b[(i, o)] - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn white_noise_null_coefficients() {
        let s = MultichannelSeries::from_channel(&gaussian(100_000, 8), 100.0).unwrap();
        let m = fit_ar(&s, 5, ArMode::Univariate).unwrap();
        for p in 0..5 {
            assert!(m.coef(0, p).abs() < 0.05);
        }
        assert!((m.noise_cov[0][0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn singular_design_regularises() {
        let s = MultichannelSeries::new(Array2::zeros((1, 50)) + 0.0, 1.0).unwrap();
        let m = fit_ar(&s, 3, ArMode::Univariate).unwrap();
        assert!(m.regularized);
        assert!(m.coefficients.iter().flatten().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn multivariate_recovers_cross_terms() {
        let n = 50_000;
        let e = gaussian(2 * n, 9);
        let mut x = Array2::zeros((2, n));
        for t in 1..n {
            x[[0, t]] = 0.5 * x[[0, t - 1]] + 0.3 * x[[1, t - 1]] + e[2 * t];
            x[[1, t]] = -0.2 * x[[0, t - 1]] + 0.4 * x[[1, t - 1]] + e[2 * t + 1];
        }
        let s = MultichannelSeries::new(x, 1.0).unwrap();
        let m = fit_ar(&s, 1, ArMode::Multivariate).unwrap();
        let a = &m.coefficients[0];
        assert!((a[0][0] - 0.5).abs() < 0.02 && (a[0][1] - 0.3).abs() < 0.02);
        assert!((a[1][0] + 0.2).abs() < 0.02 && (a[1][1] - 0.4).abs() < 0.02);
        assert!((m.noise_cov[0][0] - 1.0).abs() < 0.05 && m.noise_cov[0][1].abs() < 0.05);
    }

    #[test]
    fn psd_peak_and_flat() {
        let fs = 250.0;
        let f0 = 20.0;
        let phi1 = 2.0 * (2.0 * std::f64::consts::PI * f0 / fs).cos();
        let m = ArModel::univariate(&[vec![phi1 * 0.99, -0.98]], &[1.0], fs).unwrap();
        let grid: Vec<f64> = (0..1250).map(|i| i as f64 * 0.1).collect();
        let s = ar_psd(&m, &grid, fs).unwrap();
        let diag: Vec<f64> = s.iter().map(|m| m[(0, 0)].re).collect();
        let peak = (0..diag.len()).max_by(|&a, &b| diag[a].total_cmp(&diag[b])).unwrap();
        assert!((grid[peak] - f0).abs() <= 0.1 + 0.3);

        let flat = ArModel::univariate(&[vec![0.0, 0.0]], &[2.0], fs).unwrap();
        for m in ar_psd(&flat, &grid, fs).unwrap() {
            assert!((m[(0, 0)].re - 2.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
        }
        assert!(matches!(ar_psd(&flat, &[125.0], fs), Err(Error::Frequency(_))));
    }

    #[test]
    fn psd_random_stable_models_are_psd() {
        let mut rng = rng_from(10);
        for _ in 0..1000 {
            let a1: f64 = rng.random_range(-0.9..0.9);
            let a2: f64 = rng.random_range(-0.9..0.9) * (1.0 - a1.abs());
            let m = ArModel::univariate(&[vec![a1, a2]], &[rng.random_range(0.1..2.0)], 100.0).unwrap();
            for s in ar_psd(&m, &[0.0, 7.3, 25.0, 49.9], 100.0).unwrap() {
                assert!(s[(0, 0)].re >= 0.0 && s[(0, 0)].im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn psd_integrates_to_variance() {
        let fs = 100.0;
        let m = ArModel::univariate(&[vec![0.9, -0.5, 0.1]], &[1.0], fs).unwrap();
        let n = 5000;
        let grid: Vec<f64> = (0..n).map(|i| i as f64 * (fs / 2.0) / n as f64).collect();
        let s: Vec<f64> = ar_psd(&m, &grid, fs).unwrap().iter().map(|m| m[(0, 0)].re).collect();
        let df = grid[1] - grid[0];
        let integral: f64 = (0..n - 1).map(|i| 0.5 * (s[i] + s[i + 1]) * df).sum::<f64>() + 0.5 * (s[n - 1] + s[n - 1]) * df;
        let variance_from_psd = 2.0 * integral * 2.0 * std::f64::consts::PI / fs;
        let g = ar_generate(&m, 400_000, 3, 1.0).unwrap();
        let sample_var = crate::data::channel_stats(g.view()).1[0].powi(2);
        assert!((variance_from_psd / sample_var - 1.0).abs() < 0.1, "{variance_from_psd} vs {sample_var}");
    }

    #[test]
    fn generate_zero_noise_and_divergence() {
        let m = ArModel::univariate(&[vec![0.5, 0.2]], &[1.0], 10.0).unwrap();
        let g = ar_generate(&m, 100, 1, 0.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let bad = ArModel::univariate(&[vec![2.0]], &[1.0], 10.0).unwrap();
        assert!(matches!(ar_generate(&bad, 1000, 1, 1.0), Err(Error::Divergence { .. })));
    }

    #[test]
    fn forecast_matches_manual_recursion() {
        let m = ArModel::univariate(&[vec![0.5, -0.3]], &[1.0], 10.0).unwrap();
        let x = Array2::from_shape_vec((1, 6), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = m.forecast(x.view(), 4, 3);
        let h0 = 0.5 * 4.0 - 0.3 * 3.0;
        let h1 = 0.5 * h0 - 0.3 * 4.0;
        let h2 = 0.5 * h1 - 0.3 * h0;
        assert!((f[[0, 0]] - h0).abs() < 1e-15 && (f[[0, 1]] - h1).abs() < 1e-15 && (f[[0, 2]] - h2).abs() < 1e-15);
    }

    #[test]
    fn json_roundtrip() {
        let m = ArModel::univariate(&[vec![0.5, -0.3]], &[1.0], 10.0).unwrap();
        let back: ArModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }
}
