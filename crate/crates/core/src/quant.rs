//! Mu-law companding and uniform tokenisation.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{channel_stats, MultichannelSeries, NormParams};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Mu-law companding of a value in `[-1, 1]`.
pub fn mulaw(x: f64, mu: f64, direction: Direction) -> Result<f64> {
    if !(x.abs() <= 1.0) {
        return Err(Error::Domain(format!("mu-law input {x} outside [-1, 1]")));
    }
    Ok(match direction {
        Direction::Forward => mulaw_forward(x, mu),
        Direction::Inverse => mulaw_inverse(x, mu),
    })
}

pub fn mulaw_forward(x: f64, mu: f64) -> f64 {
    x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
}

pub fn mulaw_inverse(y: f64, mu: f64) -> f64 {
    y.signum() * ((1.0 + mu).powf(y.abs()) - 1.0) / mu
}

/// Uniform bin of a companded value; ties go to the upper bin and `+1`
/// lands in the last bin.
pub fn token_of(y: f64, q: usize) -> usize {
    let t = ((y + 1.0) / 2.0 * q as f64).floor();
    (t.max(0.0) as usize).min(q - 1)
}

/// Centre of bin `token` in the companded domain.
pub fn bin_center(token: usize, q: usize) -> f64 {
    (token as f64 + 0.5) / q as f64 * 2.0 - 1.0
}

/// Normalisation and binning parameters of a tokenisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub q: usize,
    pub mu: f64,
    pub clip: f64,
    /// Standardisation plus the post-clip max-abs scale per channel.
    pub norm: NormParams,
}

impl Quantizer {
    /// Fits standardisation and max-abs scale on `series`.
    ///
    /// Pipeline: standardise, clip to `+-clip`, divide by the per-channel
    /// max-abs of the clipped values.
    pub fn fit(series: &MultichannelSeries, q: usize, mu: f64, clip: f64) -> Result<Self> {
        if q < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {q}")));
        }
        if !(mu > 0.0) || !(clip > 0.0) {
            return Err(Error::Config("mu and clip must be positive".into()));
        }
        let (mean, std) = channel_stats(series.view());
        if let Some(channel) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::DegenerateChannel { channel });
        }
        let scale = series
            .data()
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(c, row)| {
                row.iter()
                    .map(|&v| ((v - mean[c]) / std[c]).clamp(-clip, clip).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        Ok(Self { q, mu, clip, norm: NormParams { mean, std, scale: Some(scale) } })
    }

    /// Fixed parameters, for encoding with externally chosen normalisation.
    pub fn with_params(q: usize, mu: f64, clip: f64, norm: NormParams) -> Self {
        Self { q, mu, clip, norm }
    }

    fn scale(&self, c: usize) -> f64 {
        self.norm.scale.as_ref().map_or(1.0, |s| s[c])
    }

    pub fn channels(&self) -> usize {
        self.norm.mean.len()
    }

    /// Companded value in `[-1, 1]` of raw sample `v` on channel `c`.
    pub fn compand(&self, c: usize, v: f64) -> f64 {
        let z = ((v - self.norm.mean[c]) / self.norm.std[c]).clamp(-self.clip, self.clip);
        let s = (z / self.scale(c)).clamp(-1.0, 1.0);
        mulaw_forward(s, self.mu)
    }

    pub fn encode(&self, series: &MultichannelSeries) -> Result<QuantizedSeries> {
        if series.channels() != self.channels() {
            return Err(Error::shape(format!(
                "quantizer has {} channels, series has {}",
                self.channels(),
                series.channels()
            )));
        }
        let data = series.data();
        let tokens = Array2::from_shape_fn(data.dim(), |(c, t)| token_of(self.compand(c, data[[c, t]]), self.q));
        Ok(QuantizedSeries { tokens, quantizer: self.clone(), fs: series.fs() })
    }

    /// Standardised-domain value of the centre of `token` on channel `c`.
    pub fn token_value(&self, c: usize, token: usize) -> f64 {
        mulaw_inverse(bin_center(token, self.q), self.mu) * self.scale(c)
    }

    /// Standardised-domain value of every bin on channel `c`.
    pub fn bin_values(&self, c: usize) -> Vec<f64> {
        (0..self.q).map(|k| self.token_value(c, k)).collect()
    }

    /// Raw-domain value of the centre of `token` on channel `c`.
    pub fn token_raw(&self, c: usize, token: usize) -> f64 {
        self.token_value(c, token) * self.norm.std[c] + self.norm.mean[c]
    }
}

/// Token indices `C x T` plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSeries {
    pub tokens: Array2<usize>,
    pub quantizer: Quantizer,
    pub fs: f64,
}

impl QuantizedSeries {
    pub fn channels(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn timesteps(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn q(&self) -> usize {
        self.quantizer.q
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&token) = self.tokens.iter().find(|&&t| t >= self.quantizer.q) {
            return Err(Error::Token { token, bins: self.quantizer.q });
        }
        Ok(())
    }

    /// Columns `start..end`.
    pub fn slice_time(&self, start: usize, end: usize) -> Self {
        Self {
            tokens: self.tokens.slice(ndarray::s![.., start..end]).to_owned(),
            quantizer: self.quantizer.clone(),
            fs: self.fs,
        }
    }
}

/// Quantises with parameters fitted on `series` itself.
pub fn quantize(series: &MultichannelSeries, q: usize, mu: f64, clip: f64) -> Result<QuantizedSeries> {
    Quantizer::fit(series, q, mu, clip)?.encode(series)
}

/// Maps tokens back to bin centres in the raw domain.
pub fn dequantize(qs: &QuantizedSeries) -> Result<MultichannelSeries> {
    qs.validate()?;
    let data = Array2::from_shape_fn(qs.tokens.dim(), |(c, t)| qs.quantizer.token_raw(c, qs.tokens[[c, t]]));
    MultichannelSeries::new(data, qs.fs)
}

/// Writes tokens as an NKT1 tensor and the quantizer as a JSON sidecar
/// next to it (`<path>.json`).
pub fn save_quantized(path: impl AsRef<Path>, qs: &QuantizedSeries) -> Result<()> {
    let path = path.as_ref();
    let values = qs.tokens.mapv(|t| t as f64).into_dyn();
    io::save_array(path, &values, qs.fs)?;
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&qs.quantizer)?)?;
    Ok(())
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedSeries> {
    let path = path.as_ref();
    let (values, fs) = io::load_array(path)?;
    let quantizer: Quantizer = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    let values: Array2<f64> = values
        .into_dimensionality()
        .map_err(|_| Error::Format("token tensor must be rank 2".into()))?;
    let mut tokens = Array2::zeros(values.dim());
    for ((c, t), &v) in values.indexed_iter() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Format(format!("token value {v} at ({c}, {t}) is not a non-negative integer")));
        }
        tokens[[c, t]] = v as usize;
    }
    let qs = QuantizedSeries { tokens, quantizer, fs };
    qs.validate()?;
    Ok(qs)
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
