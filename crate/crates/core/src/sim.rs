//! Event-switching oscillation simulator.
//!
//! A latent event sequence is drawn from a Markov chain with Gamma-distributed
//! lifetimes. Each event type drives its own marginally stable AR(2)
//! oscillator; the oscillation is damped from the event onset, passed through
//! `asinh`, and observed under white Gaussian noise.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::MultichannelSeries;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, Rng};

/// Generative description of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    /// Oscillation frequency of each event type in Hz.
    pub frequencies: Vec<f64>,
    /// Row-stochastic `K x K` transition matrix between events.
    pub transition: Vec<Vec<f64>>,
    /// Gamma lifetime shape.
    pub gamma_shape: f64,
    /// Gamma lifetime scale in samples.
    pub gamma_scale: f64,
    /// Damping rate per sample.
    pub damping: f64,
    /// Innovation standard deviation of each event's AR(2) process.
    pub ar_noise_std: Vec<f64>,
    /// Observation noise standard deviation.
    pub obs_noise_std: f64,
    pub fs: f64,
    /// Length in samples.
    pub duration: usize,
    /// Start each event from `z = 1` instead of zero history, so events
    /// oscillate even without innovations.
    #[serde(default)]
    pub impulse_onset: bool,
}

/// Frequency sets of the 4-, 8- and 12-event reference simulations.
pub const FREQS_4: [f64; 4] = [10.0, 24.0, 36.0, 45.0];
pub const FREQS_8: [f64; 8] = [10.0, 14.0, 18.0, 22.0, 26.0, 33.0, 38.0, 45.0];
pub const FREQS_12: [f64; 12] = [8.0, 11.0, 14.0, 17.0, 20.0, 23.0, 26.0, 29.0, 35.0, 38.0, 41.0, 45.0];

impl SimSpec {
    pub fn k(&self) -> usize {
        self.frequencies.len()
    }

    /// Reference simulation with the given event frequencies.
    ///
    /// Transition rows are uniform draws with a zero diagonal, normalised;
    /// AR innovation std is drawn from `U[0.8, 1.0]` per event. Lifetimes
    /// follow Gamma(10, 10 samples), damping is 0.005 per sample and the
    /// observation noise variance is 2.5, at 250 Hz.
    pub fn reference(frequencies: &[f64], duration_s: f64, seed: u64) -> Self {
        let k = frequencies.len();
        let mut rng = rng_from(seed);
        let transition = (0..k)
            .map(|i| {
                if k == 1 {
                    return vec![1.0];
                }
                let mut row: Vec<f64> = (0..k).map(|j| if i == j { 0.0 } else { rng.random::<f64>() }).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect();
        let ar_noise_std = (0..k).map(|_| rng.random_range(0.8..=1.0)).collect();
        let fs = 250.0;
        Self {
            frequencies: frequencies.to_vec(),
            transition,
            gamma_shape: 10.0,
            gamma_scale: 10.0,
            damping: 0.005,
            ar_noise_std,
            obs_noise_std: 2.5f64.sqrt(),
            fs,
            duration: (duration_s * fs).round() as usize,
            impulse_onset: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Config("simulation needs at least one event type".into()));
        }
        if self.transition.len() != k || self.transition.iter().any(|r| r.len() != k) {
            return Err(Error::shape(format!("transition matrix must be {k} x {k}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Config(format!("transition row {i} is not a probability vector (sum {s})")));
            }
        }
        if self.ar_noise_std.len() != k {
            return Err(Error::shape(format!("{} AR noise levels for {k} events", self.ar_noise_std.len())));
        }
        if self.ar_noise_std.iter().any(|&s| !(s >= 0.0)) || !(self.obs_noise_std >= 0.0) {
            return Err(Error::Config("noise standard deviations must be non-negative".into()));
        }
        if !(self.gamma_shape > 0.0 && self.gamma_scale > 0.0) {
            return Err(Error::Config("Gamma shape and scale must be positive".into()));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Config("damping rate must be non-negative".into()));
        }
        if !(self.fs > 0.0) {
            return Err(Error::Config("sampling rate must be positive".into()));
        }
        for &f in &self.frequencies {
            ar2_coefficients(f, self.fs)?;
        }
        Ok(())
    }
}

/// Latent event sequence with the onset of every event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateTimecourse {
    pub states: Vec<usize>,
    /// Sample index at which each event starts; a self-transition starts a
    /// new event without changing the state value.
    pub onsets: Vec<usize>,
}

impl StateTimecourse {
    /// Timecourse whose events are the runs of equal states.
    pub fn from_states(states: Vec<usize>) -> Self {
        let onsets = (0..states.len()).filter(|&t| t == 0 || states[t] != states[t - 1]).collect();
        Self { states, onsets }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `(state, start, length)` of every event.
    pub fn events(&self) -> Vec<(usize, usize, usize)> {
        self.onsets
            .iter()
            .enumerate()
            .map(|(i, &start)| {
                let end = self.onsets.get(i + 1).copied().unwrap_or(self.states.len());
                (self.states[start], start, end - start)
            })
            .collect()
    }
}

/// AR(2) coefficients of an undamped oscillator at `f` Hz.
pub fn ar2_coefficients(f: f64, fs: f64) -> Result<(f64, f64)> {
    if !(f > 0.0 && f < fs / 2.0) {
        return Err(Error::Frequency(format!("event frequency {f} Hz outside (0, {}) Hz", fs / 2.0)));
    }
    Ok((2.0 * (2.0 * std::f64::consts::PI * f / fs).cos(), -1.0))
}

/// Draws one lifetime in samples; rounding is half-up and the result is at
/// least one sample.
pub fn sample_lifetime(gamma: &Gamma<f64>, rng: &mut Rng) -> usize {
    let g: f64 = gamma.sample(rng);
    ((g + 0.5).floor() as usize).max(1)
}

fn categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Samples the event sequence. The first event is uniform over event types;
/// each later event is drawn from the transition row of its predecessor.
pub fn sample_state_timecourse(spec: &SimSpec, seed: u64) -> Result<StateTimecourse> {
    spec.validate()?;
    let mut rng = rng_from(seed);
    let gamma = Gamma::new(spec.gamma_shape, spec.gamma_scale)
        .map_err(|e| Error::Config(format!("Gamma parameters: {e}")))?;
    let mut states = Vec::with_capacity(spec.duration);
    let mut onsets = Vec::new();
    if spec.duration == 0 {
        return Ok(StateTimecourse { states, onsets });
    }
    let mut state = rng.random_range(0..spec.k());
    while states.len() < spec.duration {
        let life = sample_lifetime(&gamma, &mut rng);
        onsets.push(states.len());
        let n = life.min(spec.duration - states.len());
        states.extend(std::iter::repeat_n(state, n));
        state = categorical(&spec.transition[state], &mut rng);
    }
    Ok(StateTimecourse { states, onsets })
}

/// Renders the observed series for a given event sequence.
///
/// Innovations and observation noise use separate streams derived from
/// `seed`, so changing one noise level leaves the other draws untouched.
pub fn render(spec: &SimSpec, tc: &StateTimecourse, seed: u64) -> Result<MultichannelSeries> {
    spec.validate()?;
    if tc.len() != spec.duration {
        return Err(Error::shape(format!(
            "timecourse has {} samples, spec duration is {}",
            tc.len(),
            spec.duration
        )));
    }
    if let Some(&bad) = tc.states.iter().find(|&&s| s >= spec.k()) {
        return Err(Error::Range(format!("state {bad} not below event count {}", spec.k())));
    }
    let coeffs: Vec<(f64, f64)> = spec
        .frequencies
        .iter()
        .map(|&f| ar2_coefficients(f, spec.fs))
        .collect::<Result<_>>()?;
    let mut eps_rng = rng_from(derive_seed(seed, 0));
    let mut eta_rng = rng_from(derive_seed(seed, 1));
    let mut out = Vec::with_capacity(tc.len());
    let mut next_onset = tc.onsets.iter().peekable();
    let (mut z1, mut z2) = (0.0f64, 0.0f64);
    let mut tau = 0usize;
    for (t, &s) in tc.states.iter().enumerate() {
        let onset = next_onset.peek().is_some_and(|&&o| o == t) || t == 0;
        if onset {
            while next_onset.peek().is_some_and(|&&o| o <= t) {
                next_onset.next();
            }
            z1 = 0.0;
            z2 = 0.0;
            tau = 0;
        }
        let (p1, p2) = coeffs[s];
        let e: f64 = StandardNormal.sample(&mut eps_rng);
        let mut z = p1 * z1 + p2 * z2 + spec.ar_noise_std[s] * e;
        if onset && spec.impulse_onset {
            z += 1.0;
        }
        z2 = z1;
        z1 = z;
        let eta: f64 = StandardNormal.sample(&mut eta_rng);
        out.push((z * (-spec.damping * tau as f64).exp()).asinh() + spec.obs_noise_std * eta);
        tau += 1;
    }
    MultichannelSeries::from_channel(&out, spec.fs)
}

/// Sub-seeds `(timecourse, render)` used by [`simulate`].
pub fn simulate_seeds(seed: u64) -> (u64, u64) {
    (derive_seed(seed, 0), derive_seed(seed, 1))
}

pub fn simulate(spec: &SimSpec, seed: u64) -> Result<(MultichannelSeries, StateTimecourse)> {
    let (s_tc, s_render) = simulate_seeds(seed);
    let tc = sample_state_timecourse(spec, s_tc)?;
    let series = render(spec, &tc, s_render)?;
    Ok((series, tc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{has_peak_near, welch_default, welch_psd, Window};

    fn single(f: f64, duration: usize) -> SimSpec {
        SimSpec {
            frequencies: vec![f],
            transition: vec![vec![1.0]],
            gamma_shape: 10.0,
            gamma_scale: 10.0,
            damping: 0.0,
            ar_noise_std: vec![0.0],
            obs_noise_std: 0.0,
            fs: 250.0,
            duration,
            impulse_onset: false,
        }
    }

    #[test]
    fn ar2_values() {
        let (p1, p2) = ar2_coefficients(10.0, 250.0).unwrap();
        assert!((p1 - 1.937166).abs() < 5e-7);
        assert_eq!(p2, -1.0);
        assert!(ar2_coefficients(62.5, 250.0).unwrap().0.abs() < 1e-12);
        assert!((ar2_coefficients(1e-6, 250.0).unwrap().0 - 2.0).abs() < 1e-9);
        assert!(matches!(ar2_coefficients(125.0, 250.0), Err(Error::Frequency(_))));
        assert!(matches!(ar2_coefficients(0.0, 250.0), Err(Error::Frequency(_))));
    }

    #[test]
    fn single_state_is_constant() {
        let tc = sample_state_timecourse(&single(10.0, 500), 1).unwrap();
        assert!(tc.states.iter().all(|&s| s == 0));
    }

    #[test]
    fn identity_transition_is_absorbing() {
        let mut spec = SimSpec::reference(&FREQS_4, 4.0, 3);
        spec.transition = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let tc = sample_state_timecourse(&spec, 9).unwrap();
        assert!(tc.states.iter().all(|&s| s == tc.states[0]));
        assert!(tc.onsets.len() > 1);
    }

    #[test]
    fn no_excitation_is_silent() {
        let spec = single(10.0, 200);
        let (x, _) = simulate(&spec, 4).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_gives_undamped_tone() {
        let mut spec = single(20.0, 5000);
        spec.transition = vec![vec![1.0]];
        spec.gamma_shape = 1e6;
        spec.gamma_scale = 1.0;
        spec.impulse_onset = true;
        let (x, tc) = simulate(&spec, 4).unwrap();
        assert_eq!(tc.onsets, vec![0]);
        let p = welch_default(&x).unwrap();
        let peak = (0..p.freqs.len()).max_by(|&a, &b| p.power[0][a].total_cmp(&p.power[0][b])).unwrap();
        assert!((p.freqs[peak] - 20.0).abs() <= p.resolution());
    }

    #[test]
    fn observation_noise_alone_is_white() {
        let mut spec = single(10.0, 250 * 200);
        spec.obs_noise_std = 1.0;
        spec.damping = 0.3;
        let (x, _) = simulate(&spec, 8).unwrap();
        let p = welch_psd(&x, 250, 0.5, Window::Hann).unwrap();
        let inner = &p.power[0][1..p.power[0].len() - 1];
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        for &v in inner {
            assert!((10.0 * (v / mean).log10()).abs() < 3.0);
        }
    }

    #[test]
    fn eight_state_peaks() {
        let spec = SimSpec::reference(&FREQS_8, 600.0, 11);
        let (x, _) = simulate(&spec, 12).unwrap();
        let p = welch_default(&x).unwrap();
        for &f in &FREQS_8 {
            assert!(has_peak_near(&p.freqs, &p.power[0], f, 1.0), "no peak near {f}");
        }
    }

    #[test]
    fn empty_and_deterministic() {
        let spec = SimSpec::reference(&FREQS_4, 0.0, 1);
        let (x, tc) = simulate(&spec, 1).unwrap();
        assert_eq!(x.timesteps(), 0);
        assert!(tc.is_empty());

        let spec = SimSpec::reference(&FREQS_4, 5.0, 1);
        assert_eq!(simulate(&spec, 5).unwrap(), simulate(&spec, 5).unwrap());
        let (_, tc) = simulate(&spec, 5).unwrap();
        assert_eq!(tc, sample_state_timecourse(&spec, simulate_seeds(5).0).unwrap());
    }

    #[test]
    fn lifetime_mean_and_transitions() {
        let spec = SimSpec::reference(&FREQS_4, 20_000.0 * 100.0 / 250.0, 2);
        let tc = sample_state_timecourse(&spec, 3).unwrap();
        let events = tc.events();
        let lifetimes: Vec<usize> = events[..events.len() - 1].iter().map(|e| e.2).collect();
        assert!(lifetimes.len() >= 10_000);
        let mean = lifetimes.iter().sum::<usize>() as f64 / lifetimes.len() as f64;
        assert!((mean / 100.0 - 1.0).abs() < 0.05, "mean {mean}");

        let k = spec.k();
        let mut counts = vec![vec![0.0; k]; k];
        for w in events.windows(2) {
            counts[w[0].0][w[1].0] += 1.0;
        }
        for i in 0..k {
            let n: f64 = counts[i].iter().sum();
            for j in 0..k {
                assert!((counts[i][j] / n - spec.transition[i][j]).abs() < 0.05);
            }
        }
    }

    #[test]
    fn observation_noise_raises_variance() {
        let mut spec = SimSpec::reference(&FREQS_4, 60.0, 2);
        let mut last = 0.0;
        for sd in [0.5, 1.0, 2.0, 4.0] {
            spec.obs_noise_std = sd;
            let (x, _) = simulate(&spec, 7).unwrap();
            let v = crate::data::channel_stats(x.view()).1[0].powi(2);
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = SimSpec::reference(&FREQS_8, 1.0, 4);
        let s = serde_json::to_string(&spec).unwrap();
        let back: SimSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
    }
}
