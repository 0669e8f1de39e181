//! Benchmarks for the aggregation and datapath hot loops live under `benches/`.
