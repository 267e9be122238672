//! Benchmarks live in `benches/`: `cargo bench -p rpn-bench`.
