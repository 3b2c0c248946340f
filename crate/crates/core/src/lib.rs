//! Latent-space self-training for domain adaptation.
//!
//! The crate covers both directions of a bidirectional self-training loop:
//!
//! * **forward**: per-class mixtures of anisotropic Gaussians ([`gmm`]) fitted on
//!   trusted source features score target features, and pixels whose best log
//!   density clears a threshold receive pseudo labels ([`pla`]);
//! * **backward**: K-Means prototypes of the target domain ([`clustering`]) measure
//!   how far each source pixel lies from target mass, and a per-pixel transferability
//!   weight ([`stm`]) down-weights hard source regions in the loss ([`losses`]).
//!
//! A small differentiable segmentor ([`toyseg`]) and a planted benchmark generator
//! ([`synthbench`]) make the whole loop runnable and checkable on a laptop. Files
//! cross process boundaries through the binary map formats in [`dataio`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod dataio;
pub mod error;
pub mod gmm;
pub mod losses;
pub mod math;
pub mod pla;
pub mod stm;
pub mod synthbench;
pub mod toyseg;

pub use error::{Error, Result};
