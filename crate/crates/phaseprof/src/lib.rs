//! Reconstruction of 3D cloud-phase volumes (38 vertical layers, 4 phase
//! classes) from multi-channel 2D imager patches.
//!
//! The crate bundles the full desk-scale pipeline:
//!
//! - [`tensor`] — dense f64 tensors, the differentiable ops the network
//!   needs (2D/3D convolution, trilinear resampling, softmax, concat,
//!   broadcasting), reverse-mode gradients and an Adam optimizer.
//! - [`model`] — the SGMAGNet architecture (dynamic height encoder,
//!   spatial/height fusion, multi-scale volumetric generator, phase-aware
//!   gating) plus a plain encoder-decoder baseline.
//! - [`colloc`] — spatiotemporal matching of profiler shots to imager
//!   pixels, vertical binning into 38 half-kilometre layers, and labeled
//!   128x128 patch extraction with sparse masks.
//! - [`synth`] — a procedural scene generator that stands in for real
//!   satellite archives, emitting paired (imager patch, dense phase truth).
//! - [`train`] — sparse-masked cross-entropy training with Adam, plateau
//!   learning-rate decay and checkpointing.
//! - [`metrics`] — cloud-mask and phase-profile evaluation with CSV and
//!   profile-strip report rendering.
//! - [`io`] — the CPTX patch container, CPCK checkpoints, scene files,
//!   track CSVs, INI configs and run manifests.
//! - [`cli`] — the `phaseprof` command-line entry points.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod colloc;
pub mod io;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod threads;
pub mod train;
