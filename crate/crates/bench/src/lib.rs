//! Criterion benchmarks for the hot kernels live in `benches/kernels.rs`:
//! gradient alignment, batch gradients, AUROC and text encoding.
//!
//! Run with `cargo bench -p gacoop-bench`.
