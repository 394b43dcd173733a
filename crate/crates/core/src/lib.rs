//! Budgeted binarization engine.
//!
//! Mixes 1-bit (XNOR + popcount) and full-precision convolutional layers in
//! one network under an explicit FLOPs budget. The crate provides the packed
//! kernels, straight-through-estimator training, the BinReLU activation, a
//! FLOPs accountant, and the greedy shrink/grow search that picks which
//! layers to binarize, plus a CLI front end over all of it.

pub mod binarize;
pub mod network;
pub mod search;
pub mod train;
pub mod tensor;

pub(crate) mod seed;
