//! Query-based black-box pixel attacks on image classifiers and object
//! detectors.
//!
//! An RL agent proposes a handful of pixels to overwrite with maximum or zero
//! brightness, the victim is queried, and a memory keeps the best perturbed
//! image seen. When the reward stops improving the agent and memory are
//! reset and the best image becomes the next starting point, so the pixel
//! budget grows one step at a time until the attack succeeds or the cycle cap
//! is hit.

pub mod agent;
pub mod attack;
pub mod campaign;
pub mod image;
pub mod metrics;
mod nn;
pub mod victims;
pub mod weights;
