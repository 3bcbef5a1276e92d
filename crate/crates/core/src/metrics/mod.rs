//! Image quality, radiomic agreement and noise-texture measures.

pub mod nps;
pub mod quality;
pub mod radiomics;

pub use nps::{nps, NpsProfile};
pub use quality::{ccc, masked_psnr, masked_ssim, psnr, ssim, Psnr};
pub use radiomics::{ccc_report, feature_vector, CccReport, FeatureVector};
