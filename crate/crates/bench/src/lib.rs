//! Criterion benchmarks for the decoding hot path; run with
//! `cargo bench -p wsc-bench`.
