//! Criterion benchmarks for dynpset. Run with `cargo bench -p dynpset-bench`.
