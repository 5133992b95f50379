//! Reference-based in-context conditioning for a toy video diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode tape.
//! * [`codec`]: exactly invertible patch codec and first-frame conditioning.
//! * [`assembly`]: prompt embedding, unified token sequence, 3D rotary positions.
//! * [`icmask`]: segment-level flow tables compiled to attention masks.
//! * [`denoiser`]: the DiT, with masked-full and decomposed attention paths.
//! * [`diffusion`]: noise schedule, target-only loss, training and ancestral sampling.
//! * [`data`]: procedural effect videos and the on-disk dataset container.
//! * [`adapt`]: one-shot concept-token adaptation.
//! * [`eval`]: effect occurrence / fidelity / leakage scoring and proxy statistics.

pub mod adapt;
pub mod assembly;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod icmask;
pub mod manifest;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
