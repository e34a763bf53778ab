//! f64 tensor kernels and a reverse-mode tape.
//!
//! All spatial tensors use channels-last layout `(H, W, C)`; row tensors are
//! `(rows, features)`. Convolution kernels are stored `(out, kh, kw, in)` so the
//! flattened kernel lines up with im2col column order `(ky, kx, c)`. Transposed
//! convolutions store the kernel of the mirrored forward convolution,
//! `(in, kh, kw, out)`, which makes the transpose exactly the adjoint of that
//! convolution and keeps the backward passes symmetric.

pub mod graph;
pub mod ops;
pub mod resample;

pub use graph::{Grads, Graph, Var};
