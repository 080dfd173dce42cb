//! Criterion benchmarks for the hot numerical kernels of `ephys-core`;
//! see `benches/kernels.rs`.
