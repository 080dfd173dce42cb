//! Simulation, decoding, forecasting and evaluation of multichannel
//! electrophysiology-style timeseries.

pub mod data;
pub mod decoders;
pub mod error;
pub mod forecasters;
pub mod hmm;
pub mod io;
pub mod linmodels;
pub mod nnet;
pub mod pfi;
pub mod quant;
pub mod repro;
pub mod rng;
pub mod sim;
pub mod spectral;

pub use data::{EpochedDataset, MultichannelSeries, NormParams};
pub use error::{Error, Result};
pub use sim::{SimSpec, StateTimecourse};
