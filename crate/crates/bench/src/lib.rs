//! Criterion benchmarks of the inner loops; run with `cargo bench -p hmws-bench`.
