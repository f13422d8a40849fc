//! End-to-end learning of finite-length BPSK codes for the Gaussian wiretap
//! channel.
//!
//! Alice's encoder and Bob's decoder are deep networks trained jointly for
//! reliability and secrecy while an adversarial decoder (Eve) trains against
//! them. Secrecy is measured as mutual information between the secret message
//! and Eve's observation, estimated with a neural Donsker-Varadhan bound.
//!
//! Crate layout:
//!
//! - [`nn`] — minimal reverse-mode differentiation engine (dense, conv1d,
//!   activations, straight-through sign) plus Adam.
//! - [`channel`] — BPSK-constrained AWGN main and wiretap channels.
//! - [`gf2`] — GF(2) reference encoders (linear block, scrambling, coset).
//! - [`nets`] — the three encoder architectures and the decoder networks.
//! - [`mine`] — Donsker-Varadhan mutual information estimation.
//! - [`trainer`] — loss functions, adaptive gradient clipping, and the
//!   alternating optimization loop.
//! - [`eval`] — BER, leakage (neural and exact-enumeration), equivocation.
//! - [`checkpoint`] — binary parameter snapshots.
//! - [`config`] — run configuration with paper/desk/ci profiles.

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gf2;
pub mod mine;
pub mod nets;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
