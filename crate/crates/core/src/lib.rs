//! Decentralized privacy sanitization for multi-agent linear estimation.
//!
//! Agents observe `y = Hx + n` with `n ~ N(0, R)` and each releases a
//! sanitized `C_i y_i + ξ_i`. A fusion center should estimate a public
//! quantity `Ux` well while each private quantity `G_i x` stays hard to
//! estimate. Both are measured through Cramér–Rao bounds:
//!
//! * [`crlb`] — baseline/perturbed bounds, utility and privacy functionals;
//! * [`sanitize`] — the `(C, Θ)` mechanism, noise normalization, sampling;
//! * [`asup`] — deciding and constructing perfect-utility / unbounded-privacy
//!   mechanisms;
//! * [`sdp`] — a dense interior-point SDP solver and the maximum-privacy
//!   programs built on it;
//! * [`altopt`] — per-agent alternating optimization of the tradeoff.
//!
//! The crate is `no_std` (it needs `alloc`); file formats, experiments and
//! the command line live in the companion `privtrade` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod altopt;
pub mod asup;
pub mod crlb;
mod error;
pub mod linalg;
pub mod model;
pub mod sanitize;
pub mod sdp;

pub use error::{Error, Result};
pub use linalg::{Mat, OrthonormalBasis, Tolerance, Vector};
pub use model::{AgentSlice, PrivacyRequest, SystemModel};
pub use sanitize::Sanitization;
