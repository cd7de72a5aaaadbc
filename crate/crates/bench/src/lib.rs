//! Benchmark-only crate. The criterion benches live in `benches/kernels.rs`
//! and cover interpolation weights, vertex gradients, point location, the
//! decoder, the splat compositor, batch sampling and the codec.
