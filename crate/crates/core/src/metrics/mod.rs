//! Reconstruction, likelihood and classification metrics plus report output.

mod eval;
mod image;
mod report;

pub use eval::{
    latent_interpolate, latent_traverse, negative_log_likelihood, non_increasing_with_slack,
    transfer_score, Delta, NllEstimate, TransferCurve,
};
pub use image::{
    mse, psnr, psnr_from_mse, ssim, Psnr, PSNR_CAP_DB, SSIM_C1, SSIM_C2, SSIM_STRIDE, SSIM_WINDOW,
};
pub use report::{decode_pnm, encode_pnm, image_strip, write_frames, EvalReport, TaskMetrics};
