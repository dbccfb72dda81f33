//! Open-set error identification for object detectors.
//!
//! A detector's raw class logits are modelled with one Gaussian mixture per
//! known class. Detections whose best class log-likelihood is low are likely
//! to be objects of a class the detector never saw in training.
//!
//! The crate is organised around the stages of that workflow:
//!
//! * [`anchor`] - fixed class centres and the anchor-loss term that pulls
//!   logits towards them, plus a small fully-connected head trainer.
//! * [`gmm`] - full-covariance mixtures fitted with EM and the global
//!   component-count selection.
//! * [`extraction`] - per-class training sets, uncertainty vectors and
//!   threshold rejection.
//! * [`dataset`] - conversion of a closed-set annotation set into an
//!   open-set benchmark.
//! * [`eval`] - detection categorisation, ROC/AUROC, TPR at fixed open-set
//!   error rates and mAP.
//! * [`interchange`] - the detection JSON format shared by every tool.
//! * [`toy`] - a synthetic open-set scenario used by the demo, the CLI and
//!   the acceptance tests.

pub mod anchor;
pub mod dataset;
mod error;
pub mod eval;
pub mod extraction;
pub mod gmm;
pub mod interchange;
pub mod toy;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Hex-encoded SHA-256 digest of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
