//! Lesion-quantification-modulated training for patch-based volumetric
//! PET denoising, exercised end to end on synthetic low-count phantoms.
//!
//! The crate provides:
//!
//! - [`volume`]: dense 3D SUV volumes, patch grids with boundary-flush
//!   tiling, overlap-averaged reassembly, and the `LQMV` file format.
//! - [`phantom`]: synthetic lesion phantoms, Poisson/binomial count
//!   thinning across low-count levels, and cohort manifests.
//! - [`seg`]: lesion probability maps from an oracle or a heuristic
//!   observer, binarization, and 26-connected component labeling.
//! - [`lesion`]: noise-aware lesion-weighted patch sampling and the
//!   lesion consistency loss with its analytic subgradient.
//! - [`parcel`]: multiscale sliding sub-volume parcellation and the
//!   mean/max quantification-consistency loss (summed-area-table and
//!   monotone-queue accelerated), plus its brute-force oracle form.
//! - [`denoiser`]: two tiny hand-differentiated architectures, Adam, the
//!   combined objective with ablation toggles, the deterministic training
//!   loop, and full-volume inference.
//! - [`metrics`]: NRMSE/PSNR/SSIM, lesion SUV and TLG biases, the Tversky
//!   observer index, and cohort-level evaluation with CSV output.
//! - [`stats`]: Wilcoxon signed-rank (exact and approximate) and
//!   Bland-Altman analysis.

pub mod denoiser;
pub mod error;
pub mod lesion;
pub mod metrics;
pub mod parcel;
pub mod phantom;
pub mod seg;
pub mod smooth;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
